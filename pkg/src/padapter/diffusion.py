"""Noise schedule, forward diffusion, guided reverse sampling and blending.

Timesteps are counted as "noise steps applied": t = 0 is the clean image and
``alpha_bar_at(0)`` is exactly 1, t in [1, T] indexes the schedule arrays.
The reverse update is the exact strided posterior step: it estimates x0 from
the predicted noise, then samples q(x_{t_prev} | x_t, x0) for any t_prev < t,
adding no noise when t_prev = 0.  Inpainting runs blend every step: generated
content is kept inside the mask, everything outside is replaced by the known
image forward-diffused to the current level, which preserves known pixels
exactly at t = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rng
from .autodiff import ContractError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray        # (T,) in (0, 1)
    alpha_bar: np.ndarray   # (T,) cumulative products of (1 - beta)

    def alpha_bar_at(self, t: int) -> float:
        """Signal retention after t noise steps; exactly 1 at t = 0."""
        if not 0 <= t <= self.T:
            raise ContractError(f"timestep {t} outside [0, {self.T}]")
        return 1.0 if t == 0 else float(self.alpha_bar[t - 1])


def make_schedule(T: int, beta_start: float = 0.001, beta_end: float = 0.12) -> NoiseSchedule:
    """Linear beta ramp with cumulative-product alpha_bar."""
    if T < 1:
        raise ContractError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ContractError(
            f"beta range must satisfy 0 < start <= end < 1, got ({beta_start}, {beta_end})")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bar = np.cumprod(1.0 - beta)
    return NoiseSchedule(T=T, beta=beta, alpha_bar=alpha_bar)


def forward_diffuse(x0: np.ndarray, t: int, eps: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """sqrt(a_bar_t) * x0 + sqrt(1 - a_bar_t) * eps; identity at t = 0."""
    if x0.shape != eps.shape:
        raise ContractError(f"noise shape {eps.shape} does not match image {x0.shape}")
    ab = schedule.alpha_bar_at(t)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def cfg_combine(eps_uncond: np.ndarray, eps_cond: np.ndarray, scale: float) -> np.ndarray:
    """Classifier-free guidance: uncond + scale * (cond - uncond)."""
    if eps_uncond.shape != eps_cond.shape:
        raise ContractError(
            f"guidance shapes differ: {eps_uncond.shape} vs {eps_cond.shape}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


@dataclass(frozen=True)
class LatentState:
    value: np.ndarray
    t: int


def sample_step(state: LatentState, eps_hat: np.ndarray, schedule: NoiseSchedule,
                noise: np.ndarray | None, t_prev: int | None = None,
                clip_x0: bool = False) -> LatentState:
    """One reverse posterior step from state.t down to t_prev (default t - 1).

    Deterministic given the supplied noise array; the step into t_prev = 0 has
    zero posterior variance, so no noise is added there.
    """
    t = state.t
    if t <= 0:
        raise ContractError("cannot step below timestep 0")
    if t_prev is None:
        t_prev = t - 1
    if not 0 <= t_prev < t:
        raise ContractError(f"t_prev {t_prev} must lie in [0, {t})")
    y = state.value
    ab_t = schedule.alpha_bar_at(t)
    ab_p = schedule.alpha_bar_at(t_prev)
    x0 = (y - np.sqrt(1.0 - ab_t) * eps_hat) / np.sqrt(ab_t)
    if clip_x0:
        x0 = np.clip(x0, 0.0, 1.0)
    alpha_eff = ab_t / ab_p
    beta_eff = 1.0 - alpha_eff
    denom = 1.0 - ab_t
    mean = (np.sqrt(alpha_eff) * (1.0 - ab_p) * y + np.sqrt(ab_p) * beta_eff * x0) / denom
    var = (1.0 - ab_p) / denom * beta_eff
    if var > 0.0:
        if noise is None:
            raise ContractError("noise required for a stochastic step")
        mean = mean + np.sqrt(var) * noise
    return LatentState(value=mean, t=t_prev)


def blend_step(y_gen: np.ndarray, y_known: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mask-guided fusion: generated content inside the hole (mask = 1),
    known content outside.  Mask is (H, W) and broadcasts across channels."""
    if y_gen.shape != y_known.shape:
        raise ContractError(f"blend shapes differ: {y_gen.shape} vs {y_known.shape}")
    if mask.shape != y_gen.shape[-2:]:
        raise ContractError(f"mask {mask.shape} does not cover image {y_gen.shape}")
    if not np.all((mask == 0.0) | (mask == 1.0)):
        raise ContractError("blend mask must be strictly binary")
    m = mask[None] if y_gen.ndim == 3 else mask
    return y_gen * m + y_known * (1.0 - m)


def sampling_timesteps(T: int, steps: int) -> list[int]:
    """Evenly strided descending sub-schedule from T to 0 (inclusive)."""
    if steps < 1:
        raise ContractError("need at least one sampling step")
    ts = np.unique(np.round(np.linspace(0, T, min(steps, T) + 1)).astype(int))
    return list(ts[::-1])


@dataclass
class SamplerConfig:
    steps: int = 30
    cfg_scale: float = 7.0
    clip_x0: bool = True


def sample_inpaint(predict_eps, known: np.ndarray, mask: np.ndarray,
                   schedule: NoiseSchedule, seed_key: int,
                   cfg: SamplerConfig | None = None) -> np.ndarray:
    """Full guided inpainting loop.

    ``predict_eps(y, t)`` returns the (already guidance-combined) noise
    prediction.  ``known`` is the masked input image (holes zeroed); its
    unmasked pixels are preserved exactly in the result.  All randomness
    comes from sub-streams of ``seed_key``, one per purpose and timestep, so
    the loop is a pure function of its arguments.
    """
    if cfg is None:
        cfg = SamplerConfig()
    shape = known.shape
    ts = sampling_timesteps(schedule.T, cfg.steps)
    y = rng.Stream(rng.derive_key(seed_key, "init"), lanes=256).normal(shape)
    for t_cur, t_prev in zip(ts[:-1], ts[1:]):
        eps = predict_eps(y, t_cur)
        noise = None
        if t_prev > 0:
            noise = rng.Stream(rng.derive_key(seed_key, "step", t_cur), lanes=256).normal(shape)
        state = sample_step(LatentState(y, t_cur), eps, schedule, noise,
                            t_prev=t_prev, clip_x0=cfg.clip_x0)
        y_known = known
        if t_prev > 0:
            kn = rng.Stream(rng.derive_key(seed_key, "blend", t_prev), lanes=256).normal(shape)
            y_known = forward_diffuse(known, t_prev, kn, schedule)
        y = blend_step(state.value, y_known, mask)
    return y
