"""Labeled image corpora: procedural "real" faces and generator fakes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..synthesis import generate, stack_latents, stack_noise

REAL, FAKE = 0, 1


@dataclass
class LabeledImages:
    """A batch of images ``(N, C, H, W)`` in [0, 1] with binary labels.

    ``seeds`` records the per-image seed used to draw each sample.
    """

    images: torch.Tensor
    labels: torch.Tensor
    seeds: np.ndarray

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise ValueError("images and labels differ in length")
        if not torch.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0 (real) or 1 (fake)")

    def __len__(self):
        return int(self.images.shape[0])

    def subset(self, index):
        index = torch.as_tensor(index, dtype=torch.long)
        return LabeledImages(self.images[index], self.labels[index], self.seeds[index.numpy()])

    @staticmethod
    def concat(parts):
        return LabeledImages(
            torch.cat([p.images for p in parts]),
            torch.cat([p.labels for p in parts]),
            np.concatenate([p.seeds for p in parts]),
        )

    def save(self, path):
        np.savez_compressed(
            path, images=self.images.numpy(), labels=self.labels.numpy(), seeds=self.seeds
        )

    @classmethod
    def load(cls, path):
        with np.load(path) as data:
            return cls(
                torch.from_numpy(data["images"]),
                torch.from_numpy(data["labels"]),
                data["seeds"],
            )


def _soft(d, sharpness=2.5):
    # antialiased indicator of d < 0
    return 1.0 / (1.0 + np.exp(np.clip(d * sharpness, -30, 30)))


def render_face(rng: np.random.Generator, resolution: int = 32) -> np.ndarray:
    """One procedural face-like image with mild sensor noise, (3, H, W) float32 in [0, 1]."""
    s = resolution / 32.0
    yy, xx = np.mgrid[0:resolution, 0:resolution].astype(np.float64) + 0.5

    top, bottom = rng.uniform(0.05, 0.95, size=(2, 3))
    t = (yy / resolution)[..., None]
    img = top * (1 - t) + bottom * t

    cx = resolution / 2 + rng.uniform(-2, 2) * s
    cy = resolution / 2 + rng.uniform(-1.5, 2.5) * s
    rx, ry = rng.uniform(8.5, 11.5) * s, rng.uniform(10.5, 13.5) * s
    skin = np.array([rng.uniform(0.55, 0.95), 0, 0])
    skin[1] = skin[0] * rng.uniform(0.7, 0.85)
    skin[2] = skin[1] * rng.uniform(0.65, 0.85)
    r = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    shade = 1.0 - 0.15 * np.clip(r, 0, 1) ** 2
    face = _soft((r - 1.0) * min(rx, ry))[..., None]
    img = img * (1 - face) + (skin * shade[..., None]) * face

    eye_dx = rng.uniform(3.2, 4.8) * s
    eye_y = cy - rng.uniform(2.0, 4.0) * s
    eye_r = rng.uniform(1.1, 1.9) * s
    eye_col = rng.uniform(0.0, 0.3, size=3)
    for side in (-1, 1):
        ex = cx + side * eye_dx + rng.normal(0, 0.2) * s
        d = np.sqrt((xx - ex) ** 2 + (yy - eye_y) ** 2) - eye_r
        m = _soft(d)[..., None]
        img = img * (1 - m) + eye_col * m

    mouth_y = cy + rng.uniform(3.5, 6.0) * s
    half_w = rng.uniform(2.5, 4.5) * s
    curve = rng.uniform(-0.12, 0.2) / s
    thick = rng.uniform(0.5, 0.9) * s
    lip = np.array([rng.uniform(0.5, 0.85), rng.uniform(0.1, 0.3), rng.uniform(0.1, 0.3)])
    arc_y = mouth_y + curve * (xx - cx) ** 2
    d_vert = np.abs(yy - arc_y) - thick
    d_horiz = np.abs(xx - cx) - half_w
    m = (_soft(d_vert) * _soft(d_horiz))[..., None]
    img = img * (1 - m) + lip * m

    img = img + rng.normal(0.0, rng.uniform(0.01, 0.05), size=img.shape)
    return np.clip(img, 0, 1).transpose(2, 0, 1).astype(np.float32)


def build_real_corpus(seed: int, n: int, resolution: int = 32) -> LabeledImages:
    """``n`` procedural face images labeled real; image ``i`` depends only on (seed, i)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = np.arange(n, dtype=np.int64) + int(seed)
    images = np.stack([render_face(np.random.default_rng(int(s)), resolution) for s in seeds])
    return LabeledImages(torch.from_numpy(images), torch.full((n,), REAL, dtype=torch.long), seeds)


@torch.no_grad()
def generate_from_seeds(gen, seeds, batch_size=250):
    out = []
    for start in range(0, len(seeds), batch_size):
        chunk = seeds[start:start + batch_size]
        z = stack_latents(chunk, gen.config.d_z)
        noise = stack_noise(chunk, gen.config)
        out.append(generate(gen, z, noise))
    return torch.cat(out)


def build_fake_corpus(gen, seed: int, n: int) -> LabeledImages:
    """``n`` generator samples labeled fake, latent/noise seeds ``seed .. seed+n-1``."""
    if gen is None:
        raise ValueError("a trained generator is required")
    if n < 1:
        raise ValueError("n must be >= 1")
    seeds = np.arange(n, dtype=np.int64) + int(seed)
    images = generate_from_seeds(gen, [int(s) for s in seeds])
    return LabeledImages(images, torch.full((n,), FAKE, dtype=torch.long), seeds)
