"""Forward box noising and the variance-schedule bookkeeping behind it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear variance schedule with precomputed per-step and cumulative products.

    beta[i], alpha[i], alpha_bar[i] correspond to timestep t = i + 1.
    """

    t_max: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def alpha_bar_at(self, t: int) -> float:
        """Cumulative product at timestep t; t = 0 is the identity (no noise)."""
        if t == 0:
            return 1.0
        if not 1 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")
        return float(self.alpha_bar[t - 1])


@dataclass(frozen=True)
class NoisySample:
    """One noised coordinate vector together with the draw that produced it."""

    x_noisy: np.ndarray
    t: int
    eps: np.ndarray


def make_schedule(t_max: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if t_max < 1:
        raise ValueError("t_max must be >= 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("variance schedule requires 0 < beta_start <= beta_end < 1")
    if t_max == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, t_max, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    return NoiseSchedule(t_max=t_max, beta=beta, alpha=alpha, alpha_bar=alpha_bar)


def add_noise(x0: np.ndarray, t: int, schedule: NoiseSchedule, rng) -> NoisySample:
    """Noise a coordinate vector: sqrt(abar_t) * x0 + eps * sqrt(1 - abar_t).

    t = 0 is an explicit passthrough (eps = 0, x returned unchanged). eps is
    drawn i.i.d. standard normal per coordinate from the supplied generator.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if not np.all(np.isfinite(x0)):
        raise ValueError("invalid box: non-finite coordinate")
    if t == 0:
        return NoisySample(x_noisy=x0.copy(), t=0, eps=np.zeros_like(x0))
    abar = schedule.alpha_bar_at(t)
    eps = rng.standard_normal(x0.shape)
    x_noisy = np.sqrt(abar) * x0 + eps * np.sqrt(1.0 - abar)
    return NoisySample(x_noisy=x_noisy, t=t, eps=eps)


def sample_timestep(schedule: NoiseSchedule, rng) -> int:
    """Uniform timestep in [1, t_max]."""
    return int(rng.integers(1, schedule.t_max + 1))
