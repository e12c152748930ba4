"""Run manifest: what was produced, from which config, and with which checksums."""

from __future__ import annotations

import hashlib
import json
import platform
from pathlib import Path

import numpy as np
import skimage
import torch

MANIFEST_NAME = "manifest.json"


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def component_versions() -> dict:
    from .. import __version__

    return {
        "facemanifold": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "scikit-image": skimage.__version__,
        "python": platform.python_version(),
    }


class RunManifest:
    """Read-modify-write view of ``<run>/manifest.json``.

    ``artifacts`` maps run-relative paths to sha256 digests; ``timings`` maps
    stage names to wall-clock seconds; ``warnings`` is an ordered list.
    """

    def __init__(self, run_dir, config_hash=None):
        self.run_dir = Path(run_dir)
        self.path = self.run_dir / MANIFEST_NAME
        data = json.loads(self.path.read_text()) if self.path.exists() else {}
        self.config_hash = data.get("config_hash", config_hash)
        self.versions = data.get("versions", component_versions())
        self.artifacts = data.get("artifacts", {})
        self.tables = data.get("tables", {})
        self.timings = data.get("timings", {})
        self.warnings = data.get("warnings", [])
        if config_hash is not None and self.config_hash != config_hash:
            # a new config invalidates what an earlier run recorded
            self.config_hash = config_hash
            self.artifacts, self.tables, self.timings, self.warnings = {}, {}, {}, []

    def record(self, path):
        path = Path(path)
        rel = path.relative_to(self.run_dir).as_posix()
        self.artifacts[rel] = file_sha256(path)
        return rel

    def record_table(self, name, path):
        self.tables[name] = self.record(path)

    def warn(self, message):
        if message not in self.warnings:
            self.warnings.append(message)

    def to_dict(self):
        return {
            "config_hash": self.config_hash,
            "versions": self.versions,
            "artifacts": dict(sorted(self.artifacts.items())),
            "tables": dict(sorted(self.tables.items())),
            "timings": self.timings,
            "warnings": self.warnings,
        }

    def save(self):
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def verify(self) -> list:
        """Paths whose file is missing or no longer matches its recorded checksum."""
        bad = []
        for rel, digest in self.artifacts.items():
            path = self.run_dir / rel
            if not path.exists() or file_sha256(path) != digest:
                bad.append(rel)
        return bad
