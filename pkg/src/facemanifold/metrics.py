"""Distortion and perceptual-quality measures between reference and attacked images."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from skimage.metrics import structural_similarity

from .errors import ConfigError, ShapeError

PSNR_CAP = 100.0


def _as_numpy(x):
    return x.detach().cpu().double().numpy() if torch.is_tensor(x) else np.asarray(x, dtype=np.float64)


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def mse(a, b) -> float:
    a, b = _as_numpy(a), _as_numpy(b)
    _check_same_shape(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, max_value=1.0, cap=PSNR_CAP) -> float:
    """Peak signal-to-noise ratio in dB; identical images return ``cap``."""
    err = mse(a, b)
    if err == 0:
        return cap
    return float(min(cap, 10.0 * np.log10(max_value**2 / err)))


def ssim(a, b, window=7, k1=0.01, k2=0.03, max_value=1.0) -> float:
    """Mean SSIM over 7x7 uniform windows of a (C, H, W) or (H, W) image pair."""
    a, b = _as_numpy(a), _as_numpy(b)
    _check_same_shape(a, b)
    if min(a.shape[-2:]) < window:
        raise ShapeError(f"image {a.shape[-2:]} smaller than the {window}x{window} window")
    return float(
        structural_similarity(
            a, b, win_size=window, K1=k1, K2=k2, data_range=max_value,
            channel_axis=0 if a.ndim == 3 else None,
        )
    )


def _unit_normalize(f, eps=1e-10):
    return f / (f.square().sum(dim=1, keepdim=True).sqrt() + eps)


def perceptual_distance(a, b, feature_net, layers=None):
    """LPIPS-style distance using a frozen network's intermediate activations.

    For each selected layer the channel vectors are unit-normalised, the
    squared difference is summed over channels and averaged over positions;
    layer terms are summed. Returns a float for single images, a tensor (B,)
    for batches.
    """
    if any(p.requires_grad for p in feature_net.parameters()) or feature_net.training:
        raise ConfigError("feature network must be frozen (eval mode, no parameter gradients)")
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    single = a.dim() == 3
    if single:
        a, b = a.unsqueeze(0), b.unsqueeze(0)
    with torch.no_grad():
        fa, fb = feature_net.features(a), feature_net.features(b)
    idx = range(len(fa)) if layers is None else layers
    total = torch.zeros(a.shape[0], dtype=a.dtype)
    for i in idx:
        diff = _unit_normalize(fa[i]) - _unit_normalize(fb[i])
        total = total + diff.square().sum(dim=1).mean(dim=(1, 2))
    return total[0].item() if single else total


@dataclass
class QualityReport:
    mse: np.ndarray
    psnr: np.ndarray
    ssim: np.ndarray
    perceptual_distance: np.ndarray

    def means(self):
        return {
            "mse": float(np.mean(self.mse)),
            "psnr": float(np.mean(self.psnr)),
            "ssim": float(np.mean(self.ssim)),
            "perceptual_distance": float(np.mean(self.perceptual_distance)),
        }

    def __len__(self):
        return len(self.mse)


def quality_report(references, images, feature_net) -> QualityReport:
    """Per-pair metrics for two batches (N, C, H, W)."""
    if references.shape != images.shape:
        raise ShapeError(f"batches differ: {tuple(references.shape)} vs {tuple(images.shape)}")
    return QualityReport(
        mse=np.array([mse(r, x) for r, x in zip(references, images)]),
        psnr=np.array([psnr(r, x) for r, x in zip(references, images)]),
        ssim=np.array([ssim(r, x) for r, x in zip(references, images)]),
        perceptual_distance=perceptual_distance(references, images, feature_net).numpy(),
    )
