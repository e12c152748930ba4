"""Sign-gradient attacks: manifold search over latent/noise inputs and pixel-space baselines.

All attacks are batched: images ``(B, C, H, W)``, latents ``(B, d_z)``, noise
levels ``(B, 1, h, w)``. Single samples are accepted and returned unbatched.
The attacker maximises the cross-entropy of the true label (fake = 1), which
pushes detectors toward predicting real. Model parameters are never touched.
"""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field

import torch

from .errors import ConfigError, ShapeError
from .forensics import bce_from_logits
from .synthesis import generate

FAKE = 1
MANIFOLD_STRATEGIES = ("latent", "noise", "latent+noise")
ENSEMBLE_MODES = ("loss-sum", "logit-fusion", "alternating")
_LEVEL_RE = re.compile(r"^noise-level-(\d+)$")


def sign(v: torch.Tensor) -> torch.Tensor:
    """Elementwise sign with sign(0) = 0."""
    return torch.sign(v)


def latent_step(z, grad_z, eps_latent):
    if z.shape != grad_z.shape:
        raise ShapeError(f"latent {tuple(z.shape)} and gradient {tuple(grad_z.shape)} differ")
    return z + eps_latent * sign(grad_z)


def _check_levels(levels, num_levels):
    for lvl in levels:
        if not 1 <= lvl <= num_levels:
            raise ConfigError(f"noise level {lvl} outside 1..{num_levels}")


def noise_step(noise, grad_noise, eps_noise, level_mask=None):
    """Step the levels in ``level_mask`` (1-based; ``None`` means all), pass the rest through."""
    if len(noise) != len(grad_noise):
        raise ShapeError(f"{len(noise)} noise levels but {len(grad_noise)} gradients")
    levels = set(range(1, len(noise) + 1)) if level_mask is None else set(level_mask)
    _check_levels(levels, len(noise))
    out = []
    for lvl, (n, g) in enumerate(zip(noise, grad_noise), start=1):
        if lvl not in levels:
            out.append(n)
            continue
        if n.shape != g.shape:
            raise ShapeError(f"noise level {lvl}: {tuple(n.shape)} vs gradient {tuple(g.shape)}")
        out.append(n + eps_noise * sign(g))
    return out


@dataclass
class ManifoldAttackConfig:
    """``strategy`` is one of latent / noise / latent+noise / noise-level-<l>."""

    strategy: str = "latent+noise"
    eps_latent: float = 0.004
    eps_noise: float = 0.05
    max_iters: int = 10
    stop_on_success: bool = False
    target_label: int = FAKE
    seed: int = 0
    record_images: bool = False

    def __post_init__(self):
        if self.strategy not in MANIFOLD_STRATEGIES and not _LEVEL_RE.match(self.strategy):
            raise ConfigError(f"unknown manifold strategy {self.strategy!r}")
        if self.eps_latent < 0 or self.eps_noise < 0:
            raise ConfigError("step sizes must be nonnegative")
        if self.max_iters < 1:
            raise ConfigError("max_iters must be >= 1")
        if self.target_label != FAKE:
            raise ConfigError("the attacked label is always fake (1)")
        if self.level is not None and self.level < 1:
            raise ConfigError(f"noise level must be >= 1, got {self.level}")

    @property
    def level(self):
        m = _LEVEL_RE.match(self.strategy)
        return int(m.group(1)) if m else None

    @property
    def updates_latent(self):
        return self.strategy in ("latent", "latent+noise")

    def noise_levels(self, num_levels):
        """1-based levels to update, or an empty list."""
        if self.level is not None:
            _check_levels([self.level], num_levels)
            return [self.level]
        if self.strategy in ("noise", "latent+noise"):
            return list(range(1, num_levels + 1))
        return []


@dataclass
class NormAttackConfig:
    method: str = "pgd"
    norm: str = "linf"
    eps_max: float = 0.3
    alpha: float | None = None
    iters: int | None = None
    random_start: bool = False
    stop_on_success: bool = False
    seed: int = 0
    record_images: bool = False

    def __post_init__(self):
        if self.method not in ("fgsm", "pgd"):
            raise ConfigError(f"unknown method {self.method!r}")
        if self.norm not in ("linf", "l2"):
            raise ConfigError(f"unknown norm {self.norm!r}")
        if self.method == "fgsm" and self.norm != "linf":
            raise ConfigError("fgsm is defined for the l_inf norm only")
        if self.alpha is None:
            self.alpha = 0.01 if self.method == "pgd" else self.eps_max
        if self.iters is None:
            self.iters = 40 if self.method == "pgd" else 1
        if self.eps_max <= 0:
            raise ConfigError("eps_max must be positive")
        if not 0 < self.alpha <= self.eps_max:
            raise ConfigError(f"step size alpha={self.alpha} must lie in (0, eps_max={self.eps_max}]")
        if self.iters < 1:
            raise ConfigError("iters must be >= 1")

    @property
    def name(self):
        return "fgsm" if self.method == "fgsm" else f"pgd-{self.norm}"


@dataclass
class EnsembleConfig:
    mode: str = "loss-sum"
    weights: tuple | None = None

    def __post_init__(self):
        if self.mode not in ENSEMBLE_MODES:
            raise ConfigError(f"unknown ensemble mode {self.mode!r}")
        if self.weights is not None:
            self.weights = tuple(float(w) for w in self.weights)
            if any(w <= 0 for w in self.weights):
                raise ConfigError("ensemble weights must be positive")
            if self.mode == "logit-fusion" and abs(sum(self.weights) - 1.0) > 1e-9:
                raise ConfigError("logit-fusion weights must sum to 1")

    def resolved_weights(self, n_models):
        if self.weights is None:
            return (1.0 / n_models,) * n_models if self.mode == "logit-fusion" else (1.0,) * n_models
        if len(self.weights) != n_models:
            raise ConfigError(f"{len(self.weights)} weights for {n_models} models")
        return self.weights


def _as_model_list(models):
    models = list(models) if isinstance(models, (list, tuple)) else [models]
    if not models:
        raise ConfigError("at least one detector is required")
    return models


def attack_loss(models, image, y=FAKE, ens: EnsembleConfig | None = None, step_index=0,
                logits=None):
    """Scalar objective to ascend, summed over the batch.

    ``logits`` may carry precomputed per-model logits for ``image``.
    """
    models = _as_model_list(models)
    if logits is None:
        logits = [m(image) for m in models]
    if ens is None:
        if len(models) != 1:
            raise ConfigError("several detectors given without an ensemble config")
        return bce_from_logits(logits[0], y).sum()
    if len(models) < 2:
        raise ConfigError("ensemble attacks need at least two detectors")
    weights = ens.resolved_weights(len(models))
    if ens.mode == "loss-sum":
        return sum(w * bce_from_logits(lg, y).sum() for w, lg in zip(weights, logits))
    if ens.mode == "logit-fusion":
        fused = sum(w * lg for w, lg in zip(weights, logits))
        return bce_from_logits(fused, y).sum()
    return bce_from_logits(logits[step_index % len(models)], y).sum()


def ensemble_gradient(models, inputs, y=FAKE, ens: EnsembleConfig | None = None, step_index=0,
                      render=None):
    """Gradient of the (ensemble) attack loss w.r.t. ``inputs``.

    ``inputs`` is an image tensor or a list of tensors; ``render`` maps the
    inputs to an image (e.g. the generator). Returns a tensor or a list to match.
    """
    single = torch.is_tensor(inputs)
    leaves = [t.detach().clone().requires_grad_(True) for t in ([inputs] if single else inputs)]
    with torch.enable_grad():
        image = render(*leaves) if render is not None else leaves[0]
        loss = attack_loss(models, image, y, ens, step_index)
        grads = torch.autograd.grad(loss, leaves, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for g, t in zip(grads, leaves)]
    return grads[0] if single else grads


@dataclass
class AttackResult:
    """Per-sample outcome of a batched attack.

    ``p_fake`` has shape (steps + 1, n_models, B): entry ``t`` is the prediction
    on iterate ``t`` (0 = unattacked). ``success_step`` is -1 where the attack
    never succeeded.
    """

    method: str
    initial_images: torch.Tensor
    final_images: torch.Tensor
    p_fake: torch.Tensor
    success: torch.Tensor
    success_step: torch.Tensor
    steps_run: torch.Tensor
    initial_latent: torch.Tensor | None = None
    final_latent: torch.Tensor | None = None
    initial_noise: list | None = None
    final_noise: list | None = None
    linf_norms: torch.Tensor | None = None
    l2_norms: torch.Tensor | None = None
    linf_history: torch.Tensor | None = None
    l2_history: torch.Tensor | None = None
    step_images: list | None = None
    config: dict = field(default_factory=dict)

    @property
    def final_p_fake(self):
        """(n_models, B) predictions on each sample's final iterate."""
        idx = self.steps_run.view(1, 1, -1).expand(1, self.p_fake.shape[1], -1)
        return self.p_fake.gather(0, idx)[0]

    def accuracy(self, model_index=0):
        """Fraction of attacked fakes still predicted fake by the given model."""
        return (self.final_p_fake[model_index] > 0.5).double().mean().item()

    def to_records(self, sample_ids=None, seeds=None, config_hash=None):
        n = self.final_images.shape[0]
        ids = list(range(n)) if sample_ids is None else [int(i) for i in sample_ids]
        records = []
        for b in range(n):
            steps = int(self.steps_run[b])
            rec = {
                "sample": ids[b],
                "seed": None if seeds is None else int(seeds[b]),
                "method": self.method,
                "config_hash": config_hash,
                "success": bool(self.success[b]),
                "success_step": int(self.success_step[b]) if self.success[b] else None,
                "p_fake": [[float(v) for v in self.p_fake[: steps + 1, m, b]]
                           for m in range(self.p_fake.shape[1])],
            }
            if self.linf_norms is not None:
                rec["linf"] = float(self.linf_norms[b])
                rec["l2"] = float(self.l2_norms[b])
            records.append(rec)
        return records


def _predict_all(models, image):
    return [m(image) for m in models]


def _update_success(p_stack, t, success, success_step):
    # p_stack: (n_models, B); success means every targeted detector says real
    fooled = (p_stack < 0.5).all(dim=0)
    newly = fooled & ~success
    success_step[newly] = t
    return success | fooled


def _batch(x):
    return x.unsqueeze(0)


def manifold_attack(gen, detectors, z0, noise0, cfg: ManifoldAttackConfig | None = None,
                    ens: EnsembleConfig | None = None) -> AttackResult:
    """Sign-gradient search over the generator's latent and/or noise inputs."""
    cfg = cfg or ManifoldAttackConfig()
    models = _as_model_list(detectors)
    if len(models) > 1 and ens is None:
        raise ConfigError("several detectors given without an ensemble config")
    single = z0.dim() == 1
    z = _batch(z0) if single else z0
    noise = [_batch(n) for n in noise0] if single else list(noise0)
    levels = cfg.noise_levels(gen.config.num_levels)
    batch = z.shape[0]
    z, noise = z.detach(), [n.detach() for n in noise]
    init_z, init_noise = z, noise

    success = torch.zeros(batch, dtype=torch.bool)
    success_step = torch.full((batch,), -1, dtype=torch.long)
    steps_run = torch.zeros(batch, dtype=torch.long)
    p_hist, frames = [], []
    final_images = initial_images = None

    for t in range(cfg.max_iters + 1):
        active = ~success if cfg.stop_on_success else torch.ones(batch, dtype=torch.bool)
        need_grad = t < cfg.max_iters and bool(active.any())
        z_leaf = z.clone().requires_grad_(need_grad and cfg.updates_latent)
        n_leaves = [n.clone().requires_grad_(need_grad and (i + 1) in levels)
                    for i, n in enumerate(noise)]
        with torch.set_grad_enabled(need_grad):
            image = generate(gen, z_leaf, n_leaves)
            logits = _predict_all(models, image)
        p = torch.stack([torch.sigmoid(lg.detach()) for lg in logits])
        if t == 0:
            initial_images = image.detach()
            final_images = initial_images.clone()
        p_hist.append(p)
        if cfg.record_images:
            frames.append(image.detach())
        final_images = torch.where(active[:, None, None, None], image.detach(), final_images)
        steps_run = torch.where(active, torch.full_like(steps_run, t), steps_run)
        success = _update_success(p, t, success, success_step)
        if not need_grad:
            break
        if cfg.stop_on_success:
            active = ~success
            if not active.any():
                break
        leaves = ([z_leaf] if cfg.updates_latent else []) + [n_leaves[i - 1] for i in levels]
        loss = attack_loss(models, image, FAKE, ens, t, logits=logits)
        grads = list(torch.autograd.grad(loss, leaves))
        if cfg.updates_latent:
            g_z = grads.pop(0)
            z = torch.where(active[:, None], latent_step(z, g_z, cfg.eps_latent), z)
        if levels:
            g_noise = [torch.zeros_like(n) for n in noise]
            for lvl, g in zip(levels, grads):
                g_noise[lvl - 1] = g
            stepped = noise_step(noise, g_noise, cfg.eps_noise, levels)
            mask = active[:, None, None, None]
            noise = [n if (i + 1) not in levels else torch.where(mask, s, n)
                     for i, (n, s) in enumerate(zip(noise, stepped))]

    p_fake = torch.stack(p_hist)
    result = AttackResult(
        method=cfg.strategy,
        initial_images=initial_images,
        final_images=final_images,
        p_fake=p_fake,
        success=success,
        success_step=success_step,
        steps_run=steps_run,
        initial_latent=init_z,
        final_latent=z,
        initial_noise=init_noise,
        final_noise=noise,
        step_images=frames or None,
        config=asdict(cfg),
    )
    return _unbatch(result) if single else result


def project_linf(delta, eps):
    return delta.clamp(-eps, eps)


def project_l2(delta, eps):
    """Radially rescale each sample's perturbation into the l2 ball of radius ``eps``."""
    flat = delta.flatten(1)
    norm = flat.norm(dim=1)
    factor = torch.clamp(eps / norm.clamp_min(torch.finfo(delta.dtype).tiny), max=1.0)
    return delta * factor.view(-1, *([1] * (delta.dim() - 1)))


def _enforce_budget(x, x0, eps, norm):
    """Project ``x`` onto the ball around ``x0`` and the [0, 1] box, exact under float rounding."""
    if norm == "linf":
        x = (x0 + project_linf(x - x0, eps)).clamp(0, 1)
        for _ in range(8):
            d = x - x0
            over = d.abs() > eps
            if not over.any():
                break
            x = torch.where(over, torch.nextafter(x, x0), x)
        return x
    x = (x0 + project_l2(x - x0, eps)).clamp(0, 1)
    shrink = 1.0
    for _ in range(8):
        over = (x - x0).flatten(1).norm(dim=1) > eps
        if not over.any():
            break
        shrink *= 1 - 4 * torch.finfo(x.dtype).eps
        x = torch.where(over.view(-1, 1, 1, 1), x0 + (x - x0) * shrink, x)
    return x


def _ascent_direction(grad, norm):
    if norm == "linf":
        return sign(grad)
    flat = grad.flatten(1)
    length = flat.norm(dim=1).view(-1, *([1] * (grad.dim() - 1)))
    return torch.where(length > 0, grad / length.clamp_min(torch.finfo(grad.dtype).tiny),
                       torch.zeros_like(grad))


def fgsm_attack(detector, x, y=FAKE, eps_max=0.3):
    """One sign step of size ``eps_max`` followed by clipping to [0, 1]."""
    single = x.dim() == 3
    xb = x.unsqueeze(0) if single else x
    grad = ensemble_gradient(detector, xb, y)
    out = _enforce_budget(xb + eps_max * sign(grad), xb, eps_max, "linf")
    return out[0] if single else out


def pgd_attack(detectors, x0, y=FAKE, cfg: NormAttackConfig | None = None,
               ens: EnsembleConfig | None = None) -> AttackResult:
    """Iterative pixel attack with per-step projection onto the norm ball and [0, 1]."""
    cfg = cfg or NormAttackConfig()
    models = _as_model_list(detectors)
    if len(models) > 1 and ens is None:
        raise ConfigError("several detectors given without an ensemble config")
    single = x0.dim() == 3
    x0 = (_batch(x0) if single else x0).detach()
    batch = x0.shape[0]
    x = x0.clone()
    if cfg.random_start:
        rng = torch.Generator().manual_seed(cfg.seed)
        start = (torch.rand(x0.shape, generator=rng, dtype=x0.dtype) * 2 - 1) * cfg.eps_max
        x = _enforce_budget(x0 + start, x0, cfg.eps_max, cfg.norm)

    success = torch.zeros(batch, dtype=torch.bool)
    success_step = torch.full((batch,), -1, dtype=torch.long)
    steps_run = torch.zeros(batch, dtype=torch.long)
    final_images = x.clone()
    p_hist, frames, linf_hist, l2_hist = [], [], [], []

    for t in range(cfg.iters + 1):
        active = ~success if cfg.stop_on_success else torch.ones(batch, dtype=torch.bool)
        need_grad = t < cfg.iters and bool(active.any())
        leaf = x.clone().requires_grad_(need_grad)
        with torch.set_grad_enabled(need_grad):
            logits = _predict_all(models, leaf)
        p = torch.stack([torch.sigmoid(lg.detach()) for lg in logits])
        p_hist.append(p)
        delta = (x - x0).flatten(1)
        linf_hist.append(delta.abs().amax(dim=1))
        l2_hist.append(delta.norm(dim=1))
        if cfg.record_images:
            frames.append(x.clone())
        final_images = torch.where(active[:, None, None, None], x, final_images)
        steps_run = torch.where(active, torch.full_like(steps_run, t), steps_run)
        success = _update_success(p, t, success, success_step)
        if not need_grad:
            break
        if cfg.stop_on_success:
            active = ~success
            if not active.any():
                break
        loss = attack_loss(models, leaf, y, ens, t, logits=logits)
        (grad,) = torch.autograd.grad(loss, [leaf])
        stepped = _enforce_budget(x + cfg.alpha * _ascent_direction(grad, cfg.norm),
                                  x0, cfg.eps_max, cfg.norm)
        x = torch.where(active[:, None, None, None], stepped, x)

    linf = torch.stack(linf_hist)
    l2 = torch.stack(l2_hist)
    idx = steps_run.view(1, -1)
    result = AttackResult(
        method=cfg.name,
        initial_images=x0,
        final_images=final_images,
        p_fake=torch.stack(p_hist),
        success=success,
        success_step=success_step,
        steps_run=steps_run,
        linf_norms=linf.gather(0, idx)[0],
        l2_norms=l2.gather(0, idx)[0],
        linf_history=linf,
        l2_history=l2,
        step_images=frames or None,
        config=asdict(cfg),
    )
    return _unbatch(result) if single else result


def _unbatch(result: AttackResult) -> AttackResult:
    def first(v):
        return v[0] if torch.is_tensor(v) else v

    result.initial_images = first(result.initial_images)
    result.final_images = first(result.final_images)
    if result.initial_latent is not None:
        result.initial_latent = first(result.initial_latent)
        result.final_latent = first(result.final_latent)
        result.initial_noise = [n[0] for n in result.initial_noise]
        result.final_noise = [n[0] for n in result.final_noise]
    if result.step_images is not None:
        result.step_images = [f[0] for f in result.step_images]
    return result
