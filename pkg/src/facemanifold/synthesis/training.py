"""Adversarial training of the toy generator against a throwaway discriminator."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .network import GeneratorConfig, StyleGenerator, freeze, generate

log = logging.getLogger(__name__)


@dataclass
class GANTrainConfig:
    steps: int = 1500
    batch_size: int = 64
    lr: float = 2e-3
    mapping_lr_mult: float = 0.1
    r1_gamma: float = 1.0
    r1_every: int = 4
    seed: int = 0


class Discriminator(nn.Module):
    def __init__(self, channels=3, resolution=32, width=32):
        super().__init__()
        layers, ch, res = [], channels, resolution
        for out in (width, width * 2, width * 4):
            layers += [nn.Conv2d(ch, out, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
            ch, res = out, (res + 1) // 2
        self.features = nn.Sequential(*layers)
        self.head = nn.Linear(ch * res * res, 1)

    def forward(self, x):
        return self.head(self.features(x).flatten(1)).squeeze(1)


def _random_inputs(cfg: GeneratorConfig, batch, rng):
    z = torch.randn(batch, cfg.d_z, generator=rng)
    noise = [torch.randn(batch, *shape, generator=rng) for shape in cfg.noise_shapes()]
    return z, noise


def train_generator(real_images: torch.Tensor, config: GeneratorConfig | None = None,
                    train_cfg: GANTrainConfig | None = None) -> StyleGenerator:
    """Fit a StyleGenerator to ``real_images`` (N, C, H, W) with the non-saturating GAN loss.

    Returns the generator frozen (eval mode, no parameter gradients).
    """
    config = config or GeneratorConfig()
    tc = train_cfg or GANTrainConfig()
    if real_images.shape[1:] != (config.channels, config.output_resolution, config.output_resolution):
        raise ValueError(
            f"real images have shape {tuple(real_images.shape[1:])}, generator produces "
            f"{(config.channels, config.output_resolution, config.output_resolution)}"
        )
    torch.manual_seed(tc.seed)
    rng = torch.Generator().manual_seed(tc.seed)
    gen = StyleGenerator(config)
    disc = Discriminator(config.channels, config.output_resolution)
    betas = (0.0, 0.99)
    g_opt = torch.optim.Adam(
        [
            {"params": gen.mapping.parameters(), "lr": tc.lr * tc.mapping_lr_mult},
            {"params": gen.synthesis_parameters(), "lr": tc.lr},
        ],
        betas=betas,
    )
    d_opt = torch.optim.Adam(disc.parameters(), lr=tc.lr, betas=betas)
    n_real = real_images.shape[0]

    for step in range(tc.steps):
        idx = torch.randint(0, n_real, (tc.batch_size,), generator=rng)
        real = real_images[idx]
        z, noise = _random_inputs(config, tc.batch_size, rng)

        with torch.no_grad():
            fake = generate(gen, z, noise)
        d_loss = F.softplus(disc(fake)).mean() + F.softplus(-disc(real)).mean()
        if tc.r1_gamma > 0 and step % tc.r1_every == 0:
            real_r1 = real.detach().requires_grad_(True)
            (grad,) = torch.autograd.grad(disc(real_r1).sum(), real_r1, create_graph=True)
            d_loss = d_loss + 0.5 * tc.r1_gamma * tc.r1_every * grad.square().sum(dim=(1, 2, 3)).mean()
        d_opt.zero_grad(set_to_none=True)
        d_loss.backward()
        d_opt.step()

        z, noise = _random_inputs(config, tc.batch_size, rng)
        g_loss = F.softplus(-disc(generate(gen, z, noise))).mean()
        g_opt.zero_grad(set_to_none=True)
        g_loss.backward()
        g_opt.step()

        if step % 250 == 0 or step == tc.steps - 1:
            log.info("gan step %d: d_loss=%.4f g_loss=%.4f", step, d_loss.item(), g_loss.item())

    return freeze(gen)
