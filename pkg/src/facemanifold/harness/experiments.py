"""Pipeline stages and the five experiment tables.

A :class:`Run` owns one run directory::

    checkpoints/  generator.pt, detector_A.pt, detector_B.pt, perceptual.pt
    corpora/      {real,fake}_{train,val,test}.npz
    attacks/      <method>_<detector>/{result.pt,records.jsonl,sample_<i>_step_<t>.png}
    tables/       table{1..5}.csv (+ .json sidecars), table5_grid.png
    manifest.json
    report.md

Stages load what earlier stages saved, so the CLI can run them one at a
time. Accuracies in every table are over the fake attack set only.
"""

from __future__ import annotations

import contextlib
import csv
import io
import json
import logging
import math
import time
from pathlib import Path

import numpy as np
import torch
from skimage.io import imsave

from ..attacks import ENSEMBLE_MODES, EnsembleConfig, manifold_attack, pgd_attack
from ..forensics import (
    batched_logits,
    evaluate_accuracy,
    load_detector,
    save_detector,
    train_detector,
)
from ..metrics import quality_report
from ..synthesis import (
    image_to_uint8,
    load_generator,
    param_checksum,
    save_generator,
    stack_latents,
    stack_noise,
    train_generator,
)
from .config import ExperimentConfig
from .corpus import LabeledImages, build_fake_corpus, build_real_corpus, generate_from_seeds
from .manifest import RunManifest

log = logging.getLogger(__name__)

DETECTORS = ("A", "B")
SPLITS = ("train", "val", "test")
# table-1 row name -> (attack family, argument)
WHITEBOX = {
    "pgd-linf": ("pgd", "linf"),
    "pgd-l2": ("pgd", "l2"),
    "fgsm": ("fgsm", None),
    "noise": ("manifold", "noise"),
    "latent": ("manifold", "latent"),
    "noise+latent": ("manifold", "latent+noise"),
}
OURS = "noise+latent"
TRANSFER_METHODS = (OURS, "pgd-linf", "fgsm")
QUALITY_METHODS = (OURS, "pgd-linf", "fgsm")


def resolve_method(method):
    """Attack-directory name -> (family, argument).

    ``<row>@<k>`` is a table-1 attack run for ``k`` iterations,
    ``ensemble-<mode>`` the latent+noise search against both detectors, and
    ``noise-level-<l>`` the single-level noise search.
    """
    base = method.split("@")[0]
    if base in WHITEBOX:
        return WHITEBOX[base]
    if base.startswith("ensemble-"):
        return WHITEBOX[OURS]
    return "manifold", base


def _fmt(value):
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(value)


def write_table(path, header, rows, sidecar):
    """CSV with a fixed float format plus a JSON sidecar of metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    path.write_text(buf.getvalue())
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]


def _save_png(path, image):
    imsave(str(path), image_to_uint8(image), check_contrast=False)


def _accuracy(p_fake):
    return (p_fake > 0.5).double().mean().item()


class Run:
    """Stateful view of one run directory driven by an :class:`ExperimentConfig`."""

    def __init__(self, config: ExperimentConfig, out_dir, workers: int = 1):
        self.cfg = config
        self.dir = Path(out_dir)
        self.workers = workers
        torch.set_num_threads(max(1, int(workers)))
        self.dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(self.dir, config.config_hash())
        config.save(self.dir / "config.json")
        self._cache = {}

    # -- bookkeeping ------------------------------------------------------
    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    @contextlib.contextmanager
    def stage(self, name):
        start = time.perf_counter()
        log.info("stage %s: start", name)
        yield
        self.manifest.timings[name] = round(time.perf_counter() - start, 3)
        self.manifest.save()
        log.info("stage %s: done in %.1fs", name, self.manifest.timings[name])

    # -- data -------------------------------------------------------------
    def real_corpus(self, split) -> LabeledImages:
        key = f"real_{split}"
        if key not in self._cache:
            path = self.path("corpora", f"{key}.npz")
            if path.exists():
                self._cache[key] = LabeledImages.load(path)
            else:
                start, n = self.cfg.seed_ranges()[key]
                res = self.cfg.generator_config().output_resolution
                corpus = build_real_corpus(start, n, res)
                corpus.save(path)
                self.manifest.record(path)
                self._cache[key] = corpus
        return self._cache[key]

    def fake_corpus(self, split) -> LabeledImages:
        key = f"fake_{split}"
        if key not in self._cache:
            path = self.path("corpora", f"{key}.npz")
            if path.exists():
                self._cache[key] = LabeledImages.load(path)
            else:
                start, n = self.cfg.seed_ranges()[key]
                corpus = build_fake_corpus(self.generator(), start, n)
                corpus.save(path)
                self.manifest.record(path)
                self._cache[key] = corpus
        return self._cache[key]

    def labeled(self, split) -> LabeledImages:
        return LabeledImages.concat([self.real_corpus(split), self.fake_corpus(split)])

    def gen_data(self):
        """Real corpora always; fake corpora once a generator checkpoint exists."""
        with self.stage("gen-data"):
            for split in SPLITS:
                self.real_corpus(split)
            if self.generator_path().exists():
                for split in SPLITS:
                    self.fake_corpus(split)

    # -- generator --------------------------------------------------------
    def generator_path(self) -> Path:
        if self.cfg.generator_checkpoint:
            return Path(self.cfg.generator_checkpoint)
        return self.path("checkpoints", "generator.pt")

    def generator(self):
        if "generator" not in self._cache:
            self._cache["generator"] = load_generator(self.generator_path())
        return self._cache["generator"]

    def train_gan(self):
        with self.stage("train-gan"):
            gen = train_generator(self.real_corpus("train").images, self.cfg.generator_config(),
                                  self.cfg.gan_config())
            path = self.generator_path()
            path.parent.mkdir(parents=True, exist_ok=True)
            save_generator(gen, path, metadata={"seed": self.cfg.component_seed("gan"),
                                                "checksum": param_checksum(gen)})
            if path.is_relative_to(self.dir):
                self.manifest.record(path)
            self._cache["generator"] = gen
        return gen

    # -- detectors --------------------------------------------------------
    def detector_path(self, name) -> Path:
        if name in self.cfg.detector_checkpoints:
            return Path(self.cfg.detector_checkpoints[name])
        fname = "perceptual.pt" if name == "perceptual" else f"detector_{name}.pt"
        return self.path("checkpoints", fname)

    def detector(self, name):
        key = f"detector_{name}"
        if key not in self._cache:
            self._cache[key] = load_detector(self.detector_path(name))
        return self._cache[key]

    def train_detectors(self, names=("A", "B", "perceptual")):
        with self.stage("train-detector"):
            train, val, test = (self.labeled(s) for s in SPLITS)
            for name in names:
                arch = self.cfg.perceptual_arch if name == "perceptual" else name
                det = train_detector(arch, train.images, train.labels, val.images, val.labels,
                                     self.cfg.train_config(name))
                det.metadata["test_accuracy"] = evaluate_accuracy(det, test.images, test.labels)
                det.metadata["role"] = name
                path = self.detector_path(name)
                path.parent.mkdir(parents=True, exist_ok=True)
                save_detector(det, path)
                if path.is_relative_to(self.dir):
                    self.manifest.record(path)
                self._cache[f"detector_{name}"] = det
                log.info("detector %s: val %.4f test %.4f", name,
                         det.metadata["best_val_accuracy"], det.metadata["test_accuracy"])

    def clean_accuracy(self):
        """Held-out accuracy on the real+fake test split, per detector."""
        test = self.labeled("test")
        return {name: evaluate_accuracy(self.detector(name), test.images, test.labels)
                for name in DETECTORS}

    # -- attack inputs ----------------------------------------------------
    def attack_set(self):
        if "attack_set" not in self._cache:
            start, n = self.cfg.seed_ranges()["attack"]
            seeds = list(range(start, start + n))
            gen = self.generator()
            z = stack_latents(seeds, gen.config.d_z)
            noise = stack_noise(seeds, gen.config)
            with torch.no_grad():
                images = generate_from_seeds(gen, seeds, self.cfg.batch_size)
            self._cache["attack_set"] = (seeds, z, noise, images)
        return self._cache["attack_set"]

    def _run_attack(self, method, models, cfg_overrides=None, ens=None, index=None):
        """One attack over the attack set (or ``index`` subset) against ``models``."""
        seeds, z, noise, images = self.attack_set()
        if index is not None:
            z, noise, images = z[index], [n[index] for n in noise], images[index]
        family, arg = resolve_method(method)
        overrides = cfg_overrides or {}
        if family == "manifold":
            cfg = self.cfg.manifold_config(arg, **overrides)
            return manifold_attack(self.generator(), models, z, noise, cfg, ens)
        if family == "pgd":
            return pgd_attack(models, images, cfg=self.cfg.pgd_config(arg, **overrides), ens=ens)
        cfg = self.cfg.fgsm_config()
        if overrides.get("record_images"):
            cfg.record_images = True
        return pgd_attack(models, images, cfg=cfg, ens=ens)

    def _attack_dir(self, method, target):
        return self.dir / "attacks" / f"{method}_{target}"

    def _store(self, method, target, result, models_meta):
        out = self._attack_dir(method, target)
        out.mkdir(parents=True, exist_ok=True)
        payload = {
            "method": result.method,
            "models": models_meta,
            "final_images": result.final_images,
            "p_fake": result.p_fake,
            "success": result.success,
            "success_step": result.success_step,
            "steps_run": result.steps_run,
            "linf_norms": result.linf_norms,
            "l2_norms": result.l2_norms,
            "config": result.config,
        }
        torch.save(payload, out / "result.pt")
        seeds = self.attack_set()[0]
        records = result.to_records(seeds=seeds, config_hash=self.cfg.config_hash())
        with open(out / "records.jsonl", "w") as fh:
            for rec in sorted(records, key=lambda r: r["sample"]):
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self.manifest.record(out / "result.pt")
        self.manifest.record(out / "records.jsonl")

    def _snapshots(self, method, target, models, ens=None, overrides=None):
        k = min(self.cfg.snapshot_samples, self.cfg.n_attack)
        if k == 0:
            return
        index = torch.arange(k)
        res = self._run_attack(method, models, {**(overrides or {}), "record_images": True},
                               ens=ens, index=index)
        out = self._attack_dir(method, target)
        out.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(res.step_images):
            for i in range(k):
                _save_png(out / f"sample_{i}_step_{t}.png", frame[i])

    def load_attack(self, method, target):
        path = self._attack_dir(method, target) / "result.pt"
        if not path.exists():
            return None
        return torch.load(path, map_location="cpu", weights_only=False)

    def _attack_cached(self, method, target, models, ens=None, overrides=None):
        stored = self.load_attack(method, target)
        if stored is None:
            result = self._run_attack(method, models, overrides, ens)
            self._store(method, target, result, target)
            self._snapshots(method, target, models, ens, overrides)
            stored = self.load_attack(method, target)
        return stored

    @staticmethod
    def final_p_fake(stored):
        idx = stored["steps_run"].view(1, 1, -1).expand(1, stored["p_fake"].shape[1], -1)
        return stored["p_fake"].gather(0, idx)[0]

    def whitebox(self):
        """Every white-box attack of table 1 against each detector alone."""
        self.generator()
        out = {}
        for name in DETECTORS:
            det = self.detector(name)
            for method in WHITEBOX:
                out[(method, name)] = self._attack_cached(method, name, det)
        return out

    def attack(self):
        with self.stage("attack"):
            self.whitebox()
            self.manifest.save()

    # -- tables -----------------------------------------------------------
    def _clean_attack_accuracy(self):
        images = self.attack_set()[3]
        return {name: _accuracy(torch.sigmoid(batched_logits(self.detector(name), images)))
                for name in DETECTORS}

    def _common_sidecar(self, **extra):
        return {"config_hash": self.cfg.config_hash(), "n_attack": self.cfg.n_attack,
                "metric": "accuracy on attacked fake images (p_fake > 0.5)", **extra}

    def table1(self):
        with self.stage("table1"):
            results = self.whitebox()
            clean = self._clean_attack_accuracy()
            rows = [["clean", clean["A"], clean["B"]]]
            for method in WHITEBOX:
                rows.append([method] + [_accuracy(self.final_p_fake(results[(method, d)])[0])
                                        for d in DETECTORS])
            path = write_table(self.path("tables", "table1.csv"), ["attack", "A", "B"], rows,
                               self._common_sidecar(
                                   table="white-box accuracy",
                                   held_out_accuracy=self.clean_accuracy(),
                                   manifold=self.cfg.manifold, pgd=self.cfg.pgd, fgsm=self.cfg.fgsm))
            self.manifest.record_table("table1", path)
        return read_table(path)

    def _transfer_sets(self):
        """Adversarial images crafted on each source detector for each transfer method."""
        sets = {}
        for source in DETECTORS:
            det = self.detector(source)
            for method in TRANSFER_METHODS:
                if method == OURS:
                    stored = self._attack_cached(
                        f"{OURS}@{self.cfg.snapshot_iters}", source, det,
                        overrides={"max_iters": self.cfg.snapshot_iters, "stop_on_success": False})
                else:
                    stored = self._attack_cached(method, source, det)
                sets[(method, source)] = stored["final_images"]
        return sets

    def table2(self):
        with self.stage("table2"):
            clean = self._clean_attack_accuracy()
            rows = [["clean", "-", clean["A"], clean["B"]]]
            for (method, source), images in self._transfer_sets().items():
                accs = [_accuracy(torch.sigmoid(batched_logits(self.detector(t), images)))
                        for t in DETECTORS]
                rows.append([method, source] + accs)
            path = write_table(self.path("tables", "table2.csv"), ["attack", "source", "A", "B"],
                               rows, self._common_sidecar(
                                   table="transfer accuracy (rows: crafted on source; columns: tested on)",
                                   iterations_for_ours=self.cfg.snapshot_iters))
            self.manifest.record_table("table2", path)
        return read_table(path)

    def table3(self):
        with self.stage("table3"):
            models = [self.detector(d) for d in DETECTORS]
            rows = []
            for mode in ENSEMBLE_MODES:
                stored = self._attack_cached(f"ensemble-{mode}", "AB", models,
                                             ens=EnsembleConfig(mode), overrides=None)
                p = self.final_p_fake(stored)
                rows.append([mode, _accuracy(p[0]), _accuracy(p[1]),
                             stored["success"].double().mean().item()])
            path = write_table(self.path("tables", "table3.csv"),
                               ["ensemble", "A", "B", "joint_success"], rows,
                               self._common_sidecar(table="ensemble attack accuracy",
                                                    strategy="latent+noise"))
            self.manifest.record_table("table3", path)
        return read_table(path)

    def table4(self):
        with self.stage("table4"):
            clean = self._clean_attack_accuracy()
            rows = [["none", clean["A"], clean["B"]]]
            levels = self.generator().config.num_levels
            overrides = {"max_iters": self.cfg.snapshot_iters, "stop_on_success": False,
                         "eps_noise": self.cfg.ablation_eps_noise}
            for level in range(1, levels + 1):
                accs = []
                for name in DETECTORS:
                    stored = self._attack_cached(f"noise-level-{level}", name, self.detector(name),
                                                 overrides=overrides)
                    accs.append(_accuracy(self.final_p_fake(stored)[0]))
                rows.append([f"level-{level}"] + accs)
            path = write_table(self.path("tables", "table4.csv"), ["noise_level", "A", "B"], rows,
                               self._common_sidecar(
                                   table="per-level noise attack accuracy (1 = coarsest)",
                                   iterations=self.cfg.snapshot_iters,
                                   eps_noise=self.cfg.ablation_eps_noise))
            self.manifest.record_table("table4", path)
        return read_table(path)

    def table5(self):
        with self.stage("table5"):
            target = self.cfg.quality_detector
            det = self.detector(target)
            stored = {m: self._attack_cached(m, target, det) for m in QUALITY_METHODS}
            # only attacks that flipped a correct detection count as successes
            matched = stored[OURS]["p_fake"][0, 0] > 0.5
            for m in QUALITY_METHODS:
                matched &= stored[m]["success"]
            index = torch.nonzero(matched).flatten()
            n = int(index.numel())
            if n < self.cfg.quality_min_matched:
                self.manifest.warn(
                    f"table5: only {n} matched successful attacks "
                    f"(< {self.cfg.quality_min_matched}); quality means are under-powered")
            reference = self.attack_set()[3]
            net = self.detector("perceptual")
            rows = []
            for method in ("reference",) + QUALITY_METHODS:
                if n == 0:
                    rows.append([method, 0] + [float("nan")] * 4)
                    continue
                imgs = reference if method == "reference" else stored[method]["final_images"]
                means = quality_report(reference[index], imgs[index], net).means()
                rows.append([method, n, means["mse"], means["psnr"], means["ssim"],
                             means["perceptual_distance"]])
            path = write_table(self.path("tables", "table5.csv"),
                               ["method", "n_matched", "mse", "psnr", "ssim", "perceptual"], rows,
                               self._common_sidecar(
                                   table="distortion against the unattacked image",
                                   attacked_detector=target,
                                   success_counts={m: int(stored[m]["success"].sum())
                                                   for m in QUALITY_METHODS},
                                   matched_samples=index.tolist()))
            self.manifest.record_table("table5", path)
            self._quality_grid(reference, stored, index[:8])
        return read_table(path)

    def _quality_grid(self, reference, stored, index, scale=4, gap=2):
        """Rows = samples; columns = reference, fgsm, pgd-linf, ours."""
        if index.numel() == 0:
            return
        columns = [reference] + [stored[m]["final_images"] for m in ("fgsm", "pgd-linf", OURS)]
        tiles = [[image_to_uint8(col[i]) for col in columns] for i in index.tolist()]
        h, w, c = tiles[0][0].shape
        H, W = h * scale, w * scale
        grid = np.full((len(tiles) * (H + gap) - gap, len(columns) * (W + gap) - gap, c), 255,
                       dtype=np.uint8)
        for r, row in enumerate(tiles):
            for col, tile in enumerate(row):
                big = tile.repeat(scale, axis=0).repeat(scale, axis=1)
                grid[r * (H + gap):r * (H + gap) + H, col * (W + gap):col * (W + gap) + W] = big
        path = self.path("tables", "table5_grid.png")
        imsave(str(path), grid, check_contrast=False)
        self.manifest.record(path)

    # -- report -----------------------------------------------------------
    def report(self):
        with self.stage("report"):
            lines = [f"# Run report", "", f"config hash: `{self.cfg.config_hash()}`", ""]
            for i in range(1, 6):
                path = self.dir / "tables" / f"table{i}.csv"
                lines.append(f"## table{i}")
                lines.append("")
                if not path.exists():
                    lines += ["(not produced)", ""]
                    continue
                meta = json.loads(path.with_suffix(".json").read_text())
                lines += [meta.get("table", ""), ""]
                header, rows = read_table(path)
                lines.append("| " + " | ".join(header) + " |")
                lines.append("|" + "---|" * len(header))
                lines += ["| " + " | ".join(r) + " |" for r in rows]
                lines.append("")
            if self.manifest.warnings:
                lines += ["## warnings", ""] + [f"- {w}" for w in self.manifest.warnings] + [""]
            path = self.path("report.md")
            path.write_text("\n".join(lines))
            self.manifest.record(path)
        return path

    def run_all(self):
        self.gen_data()
        if not self.generator_path().exists():
            self.train_gan()
            self.gen_data()
        names = [n for n in ("A", "B", "perceptual") if not self.detector_path(n).exists()]
        if names:
            self.train_detectors(names)
        self.attack()
        for table in (self.table1, self.table2, self.table3, self.table4, self.table5):
            table()
        return self.report()

