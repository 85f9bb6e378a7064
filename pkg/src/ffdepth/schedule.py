"""DDPM noise schedule and the forward-diffusion / v-parameterization algebra.

Index convention: diffusion timesteps run t = 1..T. The arrays inside
NoiseSchedule are 0-based storage, so beta(t) == betas[t-1]. t = 0 and t = -1
are reserved for the feed-forward depth step and its extension and never enter
this module's algebra.

All array math here is written against python-scalar coefficients, so the ops
work identically on numpy arrays and torch tensors (and stay inside the torch
autograd graph when handed tensors).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta DDPM schedule: betas and their running alpha_bar product."""

    T: int
    betas: np.ndarray = field(repr=False)       # shape (T,), float64
    alpha_bars: np.ndarray = field(repr=False)  # shape (T,), float64

    def beta(self, t: int) -> float:
        self._check_t(t)
        return float(self.betas[t - 1])

    def alpha_bar(self, t: int) -> float:
        self._check_t(t)
        return float(self.alpha_bars[t - 1])

    def _check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside [1, {self.T}]")


def make_linear_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Betas linearly interpolated from beta_start to beta_end inclusive."""
    if T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(
            f"beta endpoints must satisfy 0 < beta_start <= beta_end < 1, "
            f"got ({beta_start}, {beta_end})"
        )
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    else:
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha_bars = np.cumprod(1.0 - betas)
    return NoiseSchedule(T=T, betas=betas, alpha_bars=alpha_bars)


def _check_shapes(a, b) -> None:
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def add_noise(x0, eps, t: int, sched: NoiseSchedule):
    """Forward diffusion: x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps."""
    _check_shapes(x0, eps)
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x0 + math.sqrt(1.0 - abar) * eps


def v_target(b0, eps, t: int, sched: NoiseSchedule):
    """v-parameterization target: v_t = sqrt(abar_t) * eps - sqrt(1 - abar_t) * b0."""
    _check_shapes(b0, eps)
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * eps - math.sqrt(1.0 - abar) * b0


def recover_b0(x_t, v, t: int, sched: NoiseSchedule):
    """Invert the v-parameterization: b0 = sqrt(abar_t) * x_t - sqrt(1 - abar_t) * v.

    For (x_t, v) produced by add_noise / v_target from the same (b0, eps) this
    returns b0 exactly (abar * b0 + (1 - abar) * b0).
    """
    _check_shapes(x_t, v)
    abar = sched.alpha_bar(t)
    return math.sqrt(abar) * x_t - math.sqrt(1.0 - abar) * v


def noise_from_v(x_t, v, t: int, sched: NoiseSchedule):
    """Dual identity: eps = sqrt(1 - abar_t) * x_t + sqrt(abar_t) * v."""
    _check_shapes(x_t, v)
    abar = sched.alpha_bar(t)
    return math.sqrt(1.0 - abar) * x_t + math.sqrt(abar) * v
