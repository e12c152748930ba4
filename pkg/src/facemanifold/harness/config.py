"""Experiment configuration: one JSON document drives every pipeline stage.

Every field has a desk-scale default, so ``{}`` is a valid config. Nested
sections mirror the dataclasses they configure:

``generator``   -> :class:`facemanifold.synthesis.GeneratorConfig` fields
``gan``         -> :class:`facemanifold.synthesis.GANTrainConfig` fields (``seed`` is derived)
``detector``    -> :class:`facemanifold.forensics.TrainConfig` fields (``seed`` is derived)
``manifold``    -> :class:`facemanifold.attacks.ManifoldAttackConfig` step sizes / iterations
``pgd``, ``fgsm`` -> :class:`facemanifold.attacks.NormAttackConfig` budgets
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from ..attacks import ManifoldAttackConfig, NormAttackConfig
from ..errors import ConfigError
from ..forensics import ARCHITECTURES, TrainConfig
from ..synthesis import GANTrainConfig, GeneratorConfig

# Offsets of each seed partition relative to the master seed block. Each
# partition owns ``PARTITION_WIDTH`` consecutive seeds.
PARTITION_WIDTH = 100_000
SEED_BLOCK = 10_000_000
PARTITIONS = {
    "real_train": 0,
    "real_val": 1 * PARTITION_WIDTH,
    "real_test": 2 * PARTITION_WIDTH,
    "fake_train": 10 * PARTITION_WIDTH,
    "fake_val": 11 * PARTITION_WIDTH,
    "fake_test": 12 * PARTITION_WIDTH,
    "attack": 30 * PARTITION_WIDTH,
}
# Offsets added to the master seed for each trained component.
COMPONENT_SEEDS = {"gan": 0, "A": 1, "B": 2, "perceptual": 3}


def _section(cls, values, name, drop=()):
    allowed = {f.name for f in dataclasses.fields(cls)} - set(drop)
    unknown = set(values) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {sorted(unknown)}")
    return values


@dataclass
class ExperimentConfig:
    seed: int = 0
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    n_attack: int = 500
    generator: dict = field(default_factory=dict)
    gan: dict = field(default_factory=dict)
    detector: dict = field(default_factory=dict)
    perceptual_arch: str = "B"
    manifold: dict = field(default_factory=lambda: {"eps_latent": 0.004, "eps_noise": 0.05, "max_iters": 10})
    stop_on_success: bool = True
    pgd: dict = field(default_factory=lambda: {"eps_max": 0.3, "alpha": 0.01, "iters": 40})
    fgsm: dict = field(default_factory=lambda: {"eps_max": 0.3})
    snapshot_iters: int = 3
    ablation_eps_noise: float = 0.05
    quality_detector: str = "A"
    quality_min_matched: int = 50
    snapshot_samples: int = 4
    batch_size: int = 250
    generator_checkpoint: str | None = None
    detector_checkpoints: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    # -- validation -------------------------------------------------------
    def validate(self):
        for name in ("n_train", "n_val", "n_test", "n_attack"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
            if value > PARTITION_WIDTH:
                raise ConfigError(f"{name}={value} exceeds the seed partition width {PARTITION_WIDTH}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError(f"seed must be a nonnegative integer, got {self.seed!r}")
        for name in ("generator", "gan", "detector", "manifold", "pgd", "fgsm", "detector_checkpoints"):
            if not isinstance(getattr(self, name), dict):
                raise ConfigError(f"{name} must be an object")
        try:
            self.generator_config()
            self.gan_config()
            self.train_config("A")
            self.manifold_config("latent+noise")
            self.pgd_config("linf")
            self.pgd_config("l2")
            self.fgsm_config()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.perceptual_arch not in ARCHITECTURES:
            raise ConfigError(f"perceptual_arch must be one of {ARCHITECTURES}")
        if self.quality_detector not in ARCHITECTURES:
            raise ConfigError(f"quality_detector must be one of {ARCHITECTURES}")
        unknown = set(self.detector_checkpoints) - set(ARCHITECTURES) - {"perceptual"}
        if unknown:
            raise ConfigError(f"detector_checkpoints: unknown detector(s) {sorted(unknown)}")
        if self.snapshot_iters < 1 or self.batch_size < 1 or self.snapshot_samples < 0:
            raise ConfigError("snapshot_iters and batch_size must be >= 1, snapshot_samples >= 0")
        if self.ablation_eps_noise <= 0:
            raise ConfigError("ablation_eps_noise must be positive")
        if self.quality_min_matched < 1:
            raise ConfigError("quality_min_matched must be >= 1")
        ranges = sorted(self.seed_ranges().items(), key=lambda kv: kv[1][0])
        for (a, (sa, na)), (b, (sb, _)) in zip(ranges, ranges[1:]):
            if sa + na > sb:
                raise ConfigError(f"seed partitions {a} and {b} overlap")

    # -- derived configs --------------------------------------------------
    def generator_config(self) -> GeneratorConfig:
        _section(GeneratorConfig, self.generator, "generator")
        values = dict(self.generator)
        for key in ("resolutions", "feature_channels"):
            if key in values:
                values[key] = tuple(values[key])
        return GeneratorConfig(**values)

    def gan_config(self) -> GANTrainConfig:
        _section(GANTrainConfig, self.gan, "gan", drop=("seed",))
        return GANTrainConfig(**self.gan, seed=self.component_seed("gan"))

    def train_config(self, component: str) -> TrainConfig:
        _section(TrainConfig, self.detector, "detector", drop=("seed",))
        return TrainConfig(**self.detector, seed=self.component_seed(component))

    def manifold_config(self, strategy, **overrides) -> ManifoldAttackConfig:
        _section(_ManifoldSection, self.manifold, "manifold")
        values = {**self.manifold, "stop_on_success": self.stop_on_success, **overrides}
        return ManifoldAttackConfig(strategy=strategy, seed=self.seed, **values)

    def pgd_config(self, norm, **overrides) -> NormAttackConfig:
        _section(_NormSection, self.pgd, "pgd")
        values = {**self.pgd, "stop_on_success": self.stop_on_success, **overrides}
        return NormAttackConfig("pgd", norm, seed=self.seed, **values)

    def fgsm_config(self) -> NormAttackConfig:
        _section(_NormSection, self.fgsm, "fgsm", drop=("alpha", "iters"))
        return NormAttackConfig("fgsm", "linf", seed=self.seed, **self.fgsm)

    def component_seed(self, component: str) -> int:
        return self.seed * SEED_BLOCK + COMPONENT_SEEDS[component]

    def seed_ranges(self) -> dict:
        """Partition name -> (first seed, count). Partitions never overlap."""
        sizes = {
            "real_train": self.n_train, "real_val": self.n_val, "real_test": self.n_test,
            "fake_train": self.n_train, "fake_val": self.n_val, "fake_test": self.n_test,
            "attack": self.n_attack,
        }
        base = self.seed * SEED_BLOCK
        return {name: (base + PARTITIONS[name], sizes[name]) for name in PARTITIONS}

    # -- serialization ----------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, values) -> "ExperimentConfig":
        if not isinstance(values, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown config field(s) {sorted(unknown)}")
        defaults = cls()
        merged = {}
        for name in known:
            if name not in values:
                continue
            default = getattr(defaults, name)
            # nested sections are merged over their defaults
            if isinstance(default, dict) and isinstance(values[name], dict):
                merged[name] = {**default, **values[name]}
            else:
                merged[name] = values[name]
        return cls(**merged)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            values = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        return cls.from_dict(values)

    def save(self, path):
        Path(path).write_text(self.to_json() + "\n")


@dataclass
class _ManifoldSection:
    eps_latent: float = 0.004
    eps_noise: float = 0.05
    max_iters: int = 10


@dataclass
class _NormSection:
    eps_max: float = 0.3
    alpha: float | None = None
    iters: int | None = None
