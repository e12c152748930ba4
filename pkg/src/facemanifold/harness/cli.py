"""Command-line entry point: ``facemanifold <subcommand> [--config C] [--out DIR] ...``.

Exit codes: 0 success, 2 usage error (including an unknown subcommand),
3 malformed or invalid config, 4 missing or unreadable checkpoint,
5 any other failure inside a stage.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from ..errors import CheckpointError, ConfigError
from .config import ExperimentConfig
from .experiments import Run

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_STAGE = 5

STAGES = {
    "gen-data": lambda run: run.gen_data(),
    "train-gan": lambda run: run.train_gan(),
    "train-detector": lambda run: run.train_detectors(),
    "attack": lambda run: run.attack(),
    "table1": lambda run: run.table1(),
    "table2": lambda run: run.table2(),
    "table3": lambda run: run.table3(),
    "table4": lambda run: run.table4(),
    "table5": lambda run: run.table5(),
    "report": lambda run: run.report(),
    "all": lambda run: run.run_all(),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="facemanifold",
        description="Adversarial fake images on a generator's face manifold: desk-scale experiments.",
    )
    sub = parser.add_subparsers(dest="command", metavar="SUBCOMMAND", required=True)
    helps = {
        "gen-data": "build the procedural real corpora (and fake corpora once a generator exists)",
        "train-gan": "train the style-based generator on the real training corpus",
        "train-detector": "train detectors A and B plus the perceptual feature network",
        "attack": "run every white-box attack against each detector",
        "table1": "white-box accuracy table",
        "table2": "transfer table",
        "table3": "ensemble table",
        "table4": "per-level noise ablation table",
        "table5": "image-quality table and comparison grid",
        "report": "collate all tables into report.md",
        "all": "run the whole pipeline",
    }
    for name in STAGES:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON experiment config (defaults when omitted)")
        p.add_argument("--out", default="run", help="run directory (default: ./run)")
        p.add_argument("--seed", type=int, help="override the master seed")
        p.add_argument("--workers", type=int, default=1, help="CPU threads (default 1)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    return parser


def load_config(path, seed=None) -> ExperimentConfig:
    cfg = ExperimentConfig.load(path) if path else ExperimentConfig()
    if seed is not None:
        cfg = ExperimentConfig.from_dict({**cfg.to_dict(), "seed": seed})
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors itself
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"facemanifold {stage}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.workers < 1:
        print(f"facemanifold {stage}: --workers must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        run = Run(cfg, args.out, workers=args.workers)
        result = STAGES[stage](run)
    except CheckpointError as exc:
        print(f"facemanifold {stage}: missing checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except ConfigError as exc:
        print(f"facemanifold {stage}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any stage failure becomes a diagnostic
        print(f"facemanifold {stage}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_STAGE
    if isinstance(result, tuple) and len(result) == 2:
        header, rows = result
        print(",".join(header))
        for row in rows:
            print(",".join(row))
    elif isinstance(result, Path):
        print(result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
