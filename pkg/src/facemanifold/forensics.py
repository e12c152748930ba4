"""Binary real/fake detectors, their training loop, and accuracy evaluation.

Two small architectures stand in for the full-size forensic models:

* ``"A"``: depthwise-separable residual blocks (Xception motif).
* ``"B"``: inverted-bottleneck blocks with squeeze-excitation (EfficientNet motif).

Both end in a single logit; ``p_fake = sigmoid(logit)`` and label 1 means fake.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import (
    CheckpointError,
    ConfigError,
    DegenerateDataError,
    EmptyInputError,
    InvalidInputError,
)

log = logging.getLogger(__name__)

FORMAT_TAG = "det-v1"
ARCHITECTURES = ("A", "B")
BCE_EPS = 1e-7


class SeparableConv(nn.Sequential):
    def __init__(self, in_ch, out_ch, stride=1):
        super().__init__(
            nn.Conv2d(in_ch, in_ch, 3, stride=stride, padding=1, groups=in_ch),
            nn.Conv2d(in_ch, out_ch, 1),
            nn.BatchNorm2d(out_ch),
        )


class XceptionBlock(nn.Module):
    def __init__(self, in_ch, out_ch, stride):
        super().__init__()
        self.sep1 = SeparableConv(in_ch, out_ch, stride)
        self.sep2 = SeparableConv(out_ch, out_ch)
        self.skip = nn.Sequential(nn.Conv2d(in_ch, out_ch, 1, stride=stride), nn.BatchNorm2d(out_ch))

    def forward(self, x):
        y = self.sep2(F.gelu(self.sep1(F.gelu(x))))
        return y + self.skip(x)


class SqueezeExcite(nn.Module):
    def __init__(self, ch, reduced):
        super().__init__()
        self.reduce = nn.Conv2d(ch, reduced, 1)
        self.expand = nn.Conv2d(reduced, ch, 1)

    def forward(self, x):
        s = F.silu(self.reduce(x.mean(dim=(2, 3), keepdim=True)))
        return x * torch.sigmoid(self.expand(s))


class MBConv(nn.Module):
    def __init__(self, in_ch, out_ch, stride, expand=4):
        super().__init__()
        mid = in_ch * expand
        self.expand = nn.Sequential(nn.Conv2d(in_ch, mid, 1), nn.BatchNorm2d(mid))
        self.depthwise = nn.Sequential(
            nn.Conv2d(mid, mid, 3, stride=stride, padding=1, groups=mid), nn.BatchNorm2d(mid)
        )
        self.se = SqueezeExcite(mid, max(1, in_ch // 4))
        self.project = nn.Sequential(nn.Conv2d(mid, out_ch, 1), nn.BatchNorm2d(out_ch))
        self.residual = stride == 1 and in_ch == out_ch

    def forward(self, x):
        y = F.silu(self.expand(x))
        y = F.silu(self.depthwise(y))
        y = self.project(self.se(y))
        return x + y if self.residual else y


class SepConvNet(nn.Module):
    """Architecture A."""

    def __init__(self, channels=3):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(channels, 16, 3, padding=1), nn.BatchNorm2d(16))
        self.blocks = nn.ModuleList(
            [
                XceptionBlock(16, 32, 2),
                XceptionBlock(32, 32, 1),
                XceptionBlock(32, 64, 2),
                XceptionBlock(64, 64, 1),
            ]
        )
        self.head = nn.Linear(64, 1)

    def features(self, x):
        feats = [self.stem(x)]
        for block in self.blocks:
            feats.append(block(feats[-1]))
        return feats

    def forward(self, x):
        x = F.gelu(self.features(x)[-1])
        return self.head(x.mean(dim=(2, 3))).squeeze(1)


class MBConvNet(nn.Module):
    """Architecture B."""

    def __init__(self, channels=3):
        super().__init__()
        self.stem = nn.Sequential(nn.Conv2d(channels, 16, 3, padding=1), nn.BatchNorm2d(16))
        self.blocks = nn.ModuleList(
            [
                MBConv(16, 24, 2),
                MBConv(24, 24, 1),
                MBConv(24, 40, 2),
                MBConv(40, 40, 1),
            ]
        )
        self.conv_head = nn.Sequential(nn.Conv2d(40, 96, 1), nn.BatchNorm2d(96))
        self.head = nn.Linear(96, 1)

    def features(self, x):
        feats = [F.silu(self.stem(x))]
        for block in self.blocks:
            feats.append(block(feats[-1]))
        return feats

    def forward(self, x):
        x = F.silu(self.conv_head(self.features(x)[-1]))
        return self.head(x.mean(dim=(2, 3))).squeeze(1)


class Detector(nn.Module):
    """Architecture plus preprocessing (bilinear resize to ``input_resolution``)."""

    def __init__(self, arch: str = "A", input_resolution: int = 32, channels: int = 3):
        super().__init__()
        if arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}, expected one of {ARCHITECTURES}")
        self.arch = arch
        self.input_resolution = int(input_resolution)
        self.channels = channels
        self.net = SepConvNet(channels) if arch == "A" else MBConvNet(channels)
        self.metadata = {}

    def preprocess(self, x):
        if x.shape[-1] != self.input_resolution or x.shape[-2] != self.input_resolution:
            x = F.interpolate(
                x, size=(self.input_resolution, self.input_resolution),
                mode="bilinear", align_corners=False,
            )
        return x

    def forward(self, x):
        """Fake-class logit for a batch (B, C, H, W)."""
        return self.net(self.preprocess(x))

    def features(self, x):
        return self.net.features(self.preprocess(x))

    def num_parameters(self):
        return sum(p.numel() for p in self.parameters())

    def num_layers(self):
        return sum(1 for m in self.modules() if isinstance(m, (nn.Conv2d, nn.Linear)))


def predict(detector: Detector, image: torch.Tensor):
    """Return ``(logits, p_fake)`` for one image (C, H, W) or a batch (B, C, H, W)."""
    if not torch.isfinite(image).all():
        raise InvalidInputError("image contains non-finite pixels")
    single = image.dim() == 3
    logits = detector(image.unsqueeze(0) if single else image)
    p = torch.sigmoid(logits)
    return (logits[0], p[0]) if single else (logits, p)


def predicted_label(p_fake: torch.Tensor) -> torch.Tensor:
    return (p_fake > 0.5).long()


def bce_loss(p_fake, y):
    """Binary cross-entropy with ``p`` clipped to [1e-7, 1 - 1e-7]; elementwise."""
    p = torch.as_tensor(p_fake, dtype=torch.get_default_dtype() if not torch.is_tensor(p_fake) else None)
    p = p.clamp(BCE_EPS, 1 - BCE_EPS)
    y = torch.as_tensor(y, dtype=p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log1p(-p))


def bce_from_logits(logits, y):
    """Unclipped binary cross-entropy evaluated from logits (stable, never saturates the gradient)."""
    y = torch.as_tensor(y, dtype=logits.dtype, device=logits.device).expand_as(logits)
    return F.binary_cross_entropy_with_logits(logits, y, reduction="none")


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    weight_decay: float = 1e-3
    epochs: int = 3
    validations_per_epoch: int = 5
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.batch_size, self.validations_per_epoch) <= 0:
            raise ConfigError("learning_rate, batch_size and validations_per_epoch must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be nonnegative")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")


@dataclass
class TrainHistory:
    validations: list = field(default_factory=list)  # (epoch, step, val_accuracy)
    best_index: int = -1

    @property
    def best_accuracy(self):
        return self.validations[self.best_index][2]

    @property
    def final_accuracy(self):
        return self.validations[-1][2]


def _check_both_classes(labels, name):
    present = set(torch.unique(labels).tolist())
    if present != {0, 1}:
        raise DegenerateDataError(f"{name} set must contain both classes, found {sorted(present)}")


@torch.no_grad()
def batched_logits(detector, images, batch_size=500):
    if images.shape[0] == 0:
        raise EmptyInputError("no images to evaluate")
    return torch.cat([detector(images[i:i + batch_size]) for i in range(0, images.shape[0], batch_size)])


def evaluate_accuracy(detector: Detector, images: torch.Tensor, labels: torch.Tensor) -> float:
    """Fraction of images whose predicted label (p_fake > 0.5) equals ``labels``."""
    if images.shape[0] == 0:
        raise EmptyInputError("evaluation set is empty")
    pred = predicted_label(torch.sigmoid(batched_logits(detector, images)))
    return (pred == labels.long()).double().mean().item()


def train_detector(arch, train_images, train_labels, val_images, val_labels,
                   cfg: TrainConfig | None = None, input_resolution=None) -> Detector:
    """Adam training with periodic validation; returns the best validated snapshot, frozen.

    The returned detector carries ``metadata`` (seed, best validation accuracy)
    and ``history`` (every validation point).
    """
    cfg = cfg or TrainConfig()
    _check_both_classes(train_labels, "training")
    _check_both_classes(val_labels, "validation")
    torch.manual_seed(cfg.seed)
    res = input_resolution or train_images.shape[-1]
    det = Detector(arch, res, train_images.shape[1])
    opt = torch.optim.Adam(det.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    order_rng = torch.Generator().manual_seed(cfg.seed)

    n = train_images.shape[0]
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    checkpoints = {
        round((k + 1) * steps_per_epoch / cfg.validations_per_epoch) - 1
        for k in range(cfg.validations_per_epoch)
    }
    history = TrainHistory()
    best_state = None
    y_all = train_labels.to(train_images.dtype)

    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=order_rng)
        for step in range(steps_per_epoch):
            idx = perm[step * cfg.batch_size:(step + 1) * cfg.batch_size]
            det.train()
            loss = bce_from_logits(det(train_images[idx]), y_all[idx]).mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            if step in checkpoints:
                det.eval()
                acc = evaluate_accuracy(det, val_images, val_labels)
                history.validations.append((epoch, step, acc))
                if best_state is None or acc > history.best_accuracy:
                    history.best_index = len(history.validations) - 1
                    best_state = copy.deepcopy(det.state_dict())
                log.info("detector %s epoch %d step %d: loss=%.4f val_acc=%.4f",
                         arch, epoch, step, loss.item(), acc)

    det.load_state_dict(best_state)
    det.history = history
    det.metadata = {
        "seed": cfg.seed,
        "best_val_accuracy": history.best_accuracy,
        "train_config": asdict(cfg),
    }
    return freeze(det)


def freeze(det: nn.Module) -> nn.Module:
    det.eval()
    for p in det.parameters():
        p.requires_grad_(False)
    return det


def save_detector(det: Detector, path):
    torch.save(
        {
            "format": FORMAT_TAG,
            "architecture_id": det.arch,
            "config": {"input_resolution": det.input_resolution, "channels": det.channels},
            "state_dict": det.state_dict(),
            "metadata": det.metadata,
        },
        path,
    )


def load_detector(path) -> Detector:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise CheckpointError(f"detector checkpoint not found: {path}", path) from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} checkpoint", path)
    det = Detector(payload["architecture_id"], **payload["config"])
    det.load_state_dict(payload["state_dict"])
    det.metadata = payload.get("metadata", {})
    return freeze(det)
