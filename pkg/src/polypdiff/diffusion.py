"""Diffusion process mathematics: noise schedules, the forward (noising)
process, ancestral reverse sampling, and the noise-prediction training loss.

Conventions. Timesteps run 1..T; index 0 of every schedule array holds the
boundary convention alpha_bar[0] = 1 (so beta[0] = 0 and posterior_var[0] = 0),
which resolves the t=1 posterior singularity. Schedule arrays are float64;
operations cast coefficients to the input dtype, so precision follows the
caller's tensors. The reverse step uses the fixed posterior variance
beta_tilde_t; x0 predictions are clamped to [-1, 1] at every step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch

from .checkpoint import dict_digest
from .errors import InvalidConfig, ShapeMismatch

BETA_MAX = 0.999


@dataclass(frozen=True)
class DiffusionConfig:
    schedule_kind: str = "cosine"         # "linear" | "cosine"
    T: int = 1000
    cosine_offset: float = 0.008
    conditioning: str = "none"            # "none" | "mask_concat"
    beta_start: float = 1e-4              # linear schedule endpoints
    beta_end: float = 0.02

    def validate(self) -> None:
        if self.schedule_kind not in ("linear", "cosine"):
            raise InvalidConfig(f"unknown schedule_kind {self.schedule_kind!r}")
        if self.conditioning not in ("none", "mask_concat"):
            raise InvalidConfig(f"unknown conditioning {self.conditioning!r}")
        if self.T < 2:
            raise InvalidConfig(f"T must be >= 2, got {self.T}")
        if self.cosine_offset <= 0:
            raise InvalidConfig(f"cosine_offset must be > 0, got {self.cosine_offset}")
        if not 0.0 < self.beta_start <= self.beta_end <= BETA_MAX:
            raise InvalidConfig(
                f"need 0 < beta_start <= beta_end <= {BETA_MAX}, "
                f"got ({self.beta_start}, {self.beta_end})"
            )

    def digest(self) -> str:
        return dict_digest(dict(self.__dict__))


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-timestep coefficients, all float64 tensors of length T+1."""

    T: int
    beta: torch.Tensor
    alpha: torch.Tensor
    alpha_bar: torch.Tensor
    posterior_var: torch.Tensor  # beta_t * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)


def make_schedule(cfg: DiffusionConfig) -> NoiseSchedule:
    cfg.validate()
    T = cfg.T
    if cfg.schedule_kind == "linear":
        beta_core = torch.linspace(cfg.beta_start, cfg.beta_end, T, dtype=torch.float64)
    else:
        s = cfg.cosine_offset
        t = torch.arange(T + 1, dtype=torch.float64)
        f = torch.cos(((t / T + s) / (1 + s)) * (math.pi / 2)) ** 2
        ab = f / f[0]
        beta_core = (1.0 - ab[1:] / ab[:-1]).clamp(max=BETA_MAX)
    beta = torch.cat([torch.zeros(1, dtype=torch.float64), beta_core])
    alpha = 1.0 - beta
    # recompute alpha_bar from the (possibly clipped) betas so the cumprod
    # invariant holds exactly; alpha_bar[0] = 1 by convention
    alpha_bar = torch.cumprod(alpha, dim=0)
    posterior_var = torch.zeros_like(beta)
    posterior_var[1:] = beta[1:] * (1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:])
    return NoiseSchedule(T, beta, alpha, alpha_bar, posterior_var)


def _coef(values: torch.Tensor, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather schedule values at t, shaped to broadcast against ``like``.

    t is either a python int (applied to the whole batch) or a 1-D tensor of
    per-item timesteps whose length matches the leading batch dimension.
    """
    if isinstance(t, torch.Tensor) and t.ndim > 0:
        if like.ndim < 2 or t.shape[0] != like.shape[0]:
            raise ShapeMismatch(
                f"per-item t of length {tuple(t.shape)} against input "
                f"{tuple(like.shape)}"
            )
        c = values[t.long()]
        return c.reshape(-1, *([1] * (like.ndim - 1))).to(like.dtype)
    return values[int(t)].to(like.dtype)


def _check_t(t: int | torch.Tensor, T: int, lo: int = 1) -> None:
    tt = t if isinstance(t, torch.Tensor) else torch.tensor(t)
    if tt.min() < lo or tt.max() > T:
        raise InvalidConfig(f"timestep out of range [{lo}, {T}]: {t}")


def q_sample(
    x0: torch.Tensor,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Forward process: sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * noise.

    t = 0 is allowed and returns x0 unchanged (alpha_bar[0] = 1).
    """
    if noise.shape != x0.shape:
        raise ShapeMismatch(f"noise {tuple(noise.shape)} vs x0 {tuple(x0.shape)}")
    _check_t(t, sched.T, lo=0)
    ab = _coef(sched.alpha_bar, t, x0)
    return ab.sqrt() * x0 + (1.0 - ab).sqrt() * noise


def predict_x0_from_eps(
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    eps_hat: torch.Tensor,
    sched: NoiseSchedule,
    clamp: bool = True,
) -> torch.Tensor:
    """Invert q_sample: (x_t - sqrt(1 - alpha_bar_t) * eps) / sqrt(alpha_bar_t),
    clamped to [-1, 1] unless ``clamp`` is disabled."""
    if eps_hat.shape != x_t.shape:
        raise ShapeMismatch(f"eps {tuple(eps_hat.shape)} vs x_t {tuple(x_t.shape)}")
    _check_t(t, sched.T)
    ab = _coef(sched.alpha_bar, t, x_t)
    x0 = (x_t - (1.0 - ab).sqrt() * eps_hat) / ab.sqrt()
    return x0.clamp(-1.0, 1.0) if clamp else x0


def posterior_mean(
    x0: torch.Tensor,
    x_t: torch.Tensor,
    t: int | torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Mean of q(x_{t-1} | x_t, x0):
    sqrt(alpha_bar_{t-1}) * beta_t / (1 - alpha_bar_t) * x0
    + sqrt(alpha_t) * (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * x_t.
    """
    if x0.shape != x_t.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs x_t {tuple(x_t.shape)}")
    _check_t(t, sched.T)
    t_prev = t - 1 if isinstance(t, int) else (t - 1)
    ab_prev = _coef(sched.alpha_bar, t_prev, x_t)
    ab = _coef(sched.alpha_bar, t, x_t)
    beta = _coef(sched.beta, t, x_t)
    alpha = _coef(sched.alpha, t, x_t)
    coef_x0 = ab_prev.sqrt() * beta / (1.0 - ab)
    coef_xt = alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)
    return coef_x0 * x0 + coef_xt * x_t


RngArg = torch.Generator | Sequence[torch.Generator]


def _per_item_randn(
    shape: tuple[int, ...], rng: RngArg, dtype: torch.dtype
) -> torch.Tensor:
    """Standard normal draw for a batch. With one generator per batch item,
    each item's stream is independent of the batch composition, which keeps
    per-sample seeds reproducible regardless of how sampling is batched."""
    if isinstance(rng, torch.Generator):
        return torch.randn(shape, generator=rng, dtype=dtype)
    if len(rng) != shape[0]:
        raise ShapeMismatch(f"{len(rng)} generators for a batch of {shape[0]}")
    return torch.stack([
        torch.randn(shape[1:], generator=g, dtype=dtype) for g in rng
    ])


def p_sample_step(
    denoiser: Callable[..., torch.Tensor],
    x_t: torch.Tensor,
    t: int,
    cond: torch.Tensor | None,
    sched: NoiseSchedule,
    rng: RngArg,
) -> torch.Tensor:
    """One ancestral reverse step x_t -> x_{t-1}.

    Noise is added with the fixed posterior std for t > 1 and omitted on the
    final step (t = 1), which makes that step deterministic.
    """
    _check_t(t, sched.T)
    eps_hat = denoiser(x_t, t, cond)
    x0_hat = predict_x0_from_eps(x_t, t, eps_hat, sched)
    mean = posterior_mean(x0_hat, x_t, t, sched)
    if t <= 1:
        return mean
    var = _coef(sched.posterior_var, t, x_t)
    z = _per_item_randn(tuple(x_t.shape), rng, x_t.dtype)
    return mean + var.sqrt() * z


def sample_loop(
    denoiser: Callable[..., torch.Tensor],
    shape: tuple[int, ...],
    cond: torch.Tensor | None,
    sched: NoiseSchedule,
    rng: RngArg,
) -> torch.Tensor:
    """Full reverse chain from x_T ~ N(0, I) down to the x_0 estimate,
    clamped to [-1, 1]. Batched: shape is [B, C, H, W]."""
    if len(shape) != 4:
        raise ShapeMismatch(f"expected a [B,C,H,W] shape, got {shape}")
    x = _per_item_randn(shape, rng, torch.float32)
    for t in range(sched.T, 0, -1):
        x = p_sample_step(denoiser, x, t, cond, sched, rng)
    return x.clamp(-1.0, 1.0)


def training_loss(
    denoiser: Callable[..., torch.Tensor],
    x0: torch.Tensor,
    cond: torch.Tensor | None,
    t: int | torch.Tensor,
    noise: torch.Tensor,
    sched: NoiseSchedule,
) -> torch.Tensor:
    """Noise-prediction MSE: mean over all elements of
    (noise - denoiser(q_sample(x0, t, noise), t, cond))^2."""
    x_t = q_sample(x0, t, noise, sched)
    eps_hat = denoiser(x_t, t, cond)
    if eps_hat.shape != noise.shape:
        raise ShapeMismatch(
            f"denoiser output {tuple(eps_hat.shape)} vs noise {tuple(noise.shape)}"
        )
    return ((noise - eps_hat) ** 2).mean()
