"""Toy style-based generator: mapping network plus noise-injected synthesis levels.

Level ``l`` (1-based) runs at ``resolutions[l-1]``; higher levels are finer.
Every public function accepts either a single sample (``z`` of shape
``(d_z,)``, noise tensors of shape ``(1, h, w)``) or a batch (``(B, d_z)`` and
``(B, 1, h, w)``) and returns the matching layout.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from ..errors import CheckpointError, ConfigError, ShapeError, UnsupportedHeadError

FORMAT_TAG = "synthgen-v1"


@dataclass(frozen=True)
class GeneratorConfig:
    d_z: int = 512
    d_w: int = 512
    mapping_depth: int = 3
    resolutions: tuple = (8, 16, 32)
    feature_channels: tuple = (32, 16, 8)
    channels: int = 3
    noise_gain_init: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "resolutions", tuple(int(r) for r in self.resolutions))
        object.__setattr__(self, "feature_channels", tuple(int(c) for c in self.feature_channels))
        self.validate()

    def validate(self):
        if self.d_z < 1 or self.d_w < 1:
            raise ConfigError(f"d_z and d_w must be >= 1, got d_z={self.d_z}, d_w={self.d_w}")
        if self.mapping_depth < 0:
            raise ConfigError("mapping_depth must be >= 0")
        if self.mapping_depth == 0 and self.d_w != self.d_z:
            raise ConfigError("pass-through mapping (depth 0) requires d_w == d_z")
        if len(self.resolutions) < 1:
            raise ConfigError("need at least one synthesis level")
        if len(self.feature_channels) != len(self.resolutions):
            raise ConfigError("feature_channels must have one entry per level")
        for lo, hi in zip(self.resolutions, self.resolutions[1:]):
            if hi != 2 * lo:
                raise ConfigError(f"each level must double the resolution, got {lo} -> {hi}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")

    @property
    def num_levels(self) -> int:
        return len(self.resolutions)

    @property
    def output_resolution(self) -> int:
        return self.resolutions[-1]

    def noise_shapes(self):
        return [(1, r, r) for r in self.resolutions]

    def to_dict(self):
        d = asdict(self)
        d["resolutions"] = list(self.resolutions)
        d["feature_channels"] = list(self.feature_channels)
        return d


def modulated_conv2d(x, weight, styles, demodulate=True):
    """Per-sample conv with input channels scaled by ``styles`` (B, in).

    Scales activations instead of building per-sample kernels; the demodulation
    factor is applied to the output, which is the same linear map.
    """
    out = F.conv2d(x * styles[:, :, None, None], weight, padding=weight.shape[-1] // 2)
    if demodulate:
        energy = styles.square() @ weight.square().sum(dim=(2, 3)).t()
        out = out * torch.rsqrt(energy + 1e-8)[:, :, None, None]
    return out


class MappingNetwork(nn.Module):
    def __init__(self, d_z, d_w, depth):
        super().__init__()
        dims = [d_z] + [d_w] * depth
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims, dims[1:]))

    def forward(self, z):
        x = z
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.silu(x)
        return x


class SynthesisLevel(nn.Module):
    """Upsample (except level 1), modulated 3x3 conv, additive noise, activation."""

    def __init__(self, d_w, in_ch, out_ch, upsample, noise_gain_init):
        super().__init__()
        self.upsample = upsample
        self.affine = nn.Linear(d_w, in_ch)
        nn.init.ones_(self.affine.bias)
        self.weight = nn.Parameter(torch.randn(out_ch, in_ch, 3, 3))
        self.bias = nn.Parameter(torch.zeros(out_ch))
        self.noise_gain = nn.Parameter(torch.full((out_ch,), float(noise_gain_init)))

    def forward(self, x, w, noise):
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        x = modulated_conv2d(x, self.weight, self.affine(w))
        x = x + self.noise_gain.view(1, -1, 1, 1) * noise + self.bias.view(1, -1, 1, 1)
        return F.silu(x)


class ToImage(nn.Module):
    def __init__(self, d_w, in_ch, channels):
        super().__init__()
        self.affine = nn.Linear(d_w, in_ch)
        nn.init.ones_(self.affine.bias)
        self.weight = nn.Parameter(torch.randn(channels, in_ch, 1, 1) / in_ch**0.5)
        self.bias = nn.Parameter(torch.zeros(channels))

    def forward(self, x, w):
        x = modulated_conv2d(x, self.weight, self.affine(w), demodulate=False)
        return torch.sigmoid(x + self.bias.view(1, -1, 1, 1))


class StyleGenerator(nn.Module):
    """Mapping network ``f`` followed by synthesis network ``g``."""

    def __init__(self, config: GeneratorConfig | None = None):
        super().__init__()
        self.config = config or GeneratorConfig()
        cfg = self.config
        self.mapping = MappingNetwork(cfg.d_z, cfg.d_w, cfg.mapping_depth)
        r0, c0 = cfg.resolutions[0], cfg.feature_channels[0]
        self.const = nn.Parameter(torch.randn(c0, r0, r0))
        in_chs = (c0,) + cfg.feature_channels[:-1]
        self.levels = nn.ModuleList(
            SynthesisLevel(cfg.d_w, i, o, upsample=k > 0, noise_gain_init=cfg.noise_gain_init)
            for k, (i, o) in enumerate(zip(in_chs, cfg.feature_channels))
        )
        self.to_image = ToImage(cfg.d_w, cfg.feature_channels[-1], cfg.channels)

    def synthesis_parameters(self):
        return [p for name, p in self.named_parameters() if not name.startswith("mapping.")]

    def forward(self, z, noise):
        return synthesize(self, map_latent(self, z), noise)


def _check_latent(gen, z):
    if not torch.is_tensor(z) or z.dim() not in (1, 2) or z.shape[-1] != gen.config.d_z:
        shape = tuple(z.shape) if torch.is_tensor(z) else type(z).__name__
        raise ShapeError(f"latent must have trailing dimension d_z={gen.config.d_z}, got {shape}")


def map_latent(gen: StyleGenerator, z: torch.Tensor) -> torch.Tensor:
    """Style vector ``w = f(z)``."""
    _check_latent(gen, z)
    return gen.mapping(z)


def synthesize(gen: StyleGenerator, w: torch.Tensor, noise) -> torch.Tensor:
    cfg = gen.config
    if w.dim() not in (1, 2) or w.shape[-1] != cfg.d_w:
        raise ShapeError(f"style must have trailing dimension d_w={cfg.d_w}, got {tuple(w.shape)}")
    single = w.dim() == 1
    if len(noise) != cfg.num_levels:
        raise ShapeError(f"expected {cfg.num_levels} noise levels, got {len(noise)}")
    batch = 1 if single else w.shape[0]
    ws = w.unsqueeze(0) if single else w
    x = gen.const.unsqueeze(0).expand(batch, -1, -1, -1)
    for level, (layer, n, res) in enumerate(zip(gen.levels, noise, cfg.resolutions), start=1):
        expected = (1, res, res) if single else (batch, 1, res, res)
        if tuple(n.shape) != expected:
            raise ShapeError(f"noise level {level}: expected shape {expected}, got {tuple(n.shape)}")
        x = layer(x, ws, n.unsqueeze(0) if single else n)
    img = gen.to_image(x, ws)
    return img[0] if single else img


def generate(gen: StyleGenerator, z: torch.Tensor, noise) -> torch.Tensor:
    """Image ``g(z, n)`` in [0, 1]."""
    return synthesize(gen, map_latent(gen, z), noise)


def sample_latent(seed: int, d_z: int = 64, dtype=torch.float32) -> torch.Tensor:
    if d_z < 1:
        raise ConfigError(f"d_z must be >= 1, got {d_z}")
    rng = torch.Generator().manual_seed(int(seed))
    return torch.randn(d_z, generator=rng, dtype=dtype)


def sample_noise(seed: int, config: GeneratorConfig, dtype=torch.float32) -> list:
    config.validate()
    # offset keeps the noise stream distinct from sample_latent(seed)
    rng = torch.Generator().manual_seed(int(seed) + 0x9E3779B1)
    return [torch.randn(shape, generator=rng, dtype=dtype) for shape in config.noise_shapes()]


def stack_latents(seeds, d_z, dtype=torch.float32):
    return torch.stack([sample_latent(s, d_z, dtype) for s in seeds])


def stack_noise(seeds, config, dtype=torch.float32):
    per_seed = [sample_noise(s, config, dtype) for s in seeds]
    return [torch.stack([stack[i] for stack in per_seed]) for i in range(config.num_levels)]


def input_gradients(gen: StyleGenerator, z, noise, loss_head):
    """Gradients of ``loss_head(generate(z, noise))`` w.r.t. ``z`` and each noise tensor.

    ``loss_head`` must return a scalar tensor. A tensor that does not depend on
    the image is treated as a constant head (zero gradients).
    """
    z = z.detach().clone().requires_grad_(True)
    noise = [n.detach().clone().requires_grad_(True) for n in noise]
    with torch.enable_grad():
        loss = loss_head(generate(gen, z, noise))
        if not torch.is_tensor(loss):
            raise UnsupportedHeadError(
                f"loss head returned {type(loss).__name__}; a scalar tensor is required"
            )
        if loss.numel() != 1:
            raise UnsupportedHeadError(f"loss head must return a scalar, got shape {tuple(loss.shape)}")
        if not loss.requires_grad:
            return torch.zeros_like(z), [torch.zeros_like(n) for n in noise]
        grads = torch.autograd.grad(loss.reshape(()), [z, *noise], allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, [z, *noise])]
    return grads[0], grads[1:]


def param_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def save_generator(gen: StyleGenerator, path, metadata=None):
    torch.save(
        {
            "format": FORMAT_TAG,
            "config": gen.config.to_dict(),
            "state_dict": gen.state_dict(),
            "metadata": dict(metadata or {}),
        },
        path,
    )


def load_generator(path) -> StyleGenerator:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError as exc:
        raise CheckpointError(f"generator checkpoint not found: {path}", path) from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT_TAG:
        raise CheckpointError(f"{path} is not a {FORMAT_TAG} checkpoint", path)
    gen = StyleGenerator(GeneratorConfig(**payload["config"]))
    gen.load_state_dict(payload["state_dict"])
    gen.metadata = payload.get("metadata", {})
    return freeze(gen)


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def image_to_uint8(img: torch.Tensor) -> np.ndarray:
    """(C, H, W) in [0, 1] -> (H, W, C) uint8."""
    arr = img.detach().cpu().clamp(0, 1).permute(1, 2, 0).numpy()
    return np.round(arr * 255).astype(np.uint8)

