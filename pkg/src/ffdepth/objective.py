"""Losses and trajectory operations for depth fine-tuning.

The fine-tuning objective combines, per batch:
  - synthetic half: MAE + gradient-matching between the t=0 prediction and the
    ground-truth depth latent, plus the trajectory-keeping term at a uniformly
    sampled diffusion step t in [1, T];
  - real half: MAE + gradient-matching between the t=-1 prediction (one step
    past t=0) and the teacher pseudo-label latent. Gradients flow through both
    chained steps unless detach_d0 is set.

l_final = lambda_mae * (l_mae_t0 + l_mae_tm1)
        + lambda_gm  * (l_gm_t0  + l_gm_tm1)
        + lambda_k   * l_k

The logged breakdown keeps the unweighted component values; l_final is
recomputed from them in float64 so the bookkeeping identity is exact. The
breakdown slots are keyed by supervision source: *_t0 always means
synthetic-GT terms and *_tm1 always means teacher terms (under the
teacher-at-d0 ablation the teacher terms are evaluated at t=0 but stay in the
*_tm1 slots). Terms whose effective weight is zero, or that an ablation
disables, are skipped and logged as 0.0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .schedule import NoiseSchedule, add_noise, v_target


@dataclass(frozen=True)
class LossWeights:
    gamma: float = 0.5
    lambda_mae: float = 1.0
    lambda_gm: float = 0.5
    lambda_k: float = 0.2

    def __post_init__(self):
        vals = (self.gamma, self.lambda_mae, self.lambda_gm, self.lambda_k)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("loss weights must be finite")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")
        if min(self.lambda_mae, self.lambda_gm, self.lambda_k) < 0:
            raise ValueError("lambda weights must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    l_mae_t0: float
    l_gm_t0: float
    l_mae_tm1: float
    l_gm_tm1: float
    l_k: float
    l_final: float

    FIELDS = ("l_mae_t0", "l_gm_t0", "l_mae_tm1", "l_gm_tm1", "l_k", "l_final")


def recompute_final(b: LossBreakdown, w: LossWeights) -> float:
    """The bookkeeping identity: l_final from the unweighted components."""
    return (
        w.lambda_mae * (b.l_mae_t0 + b.l_mae_tm1)
        + w.lambda_gm * (b.l_gm_t0 + b.l_gm_tm1)
        + w.lambda_k * b.l_k
    )


def blend_latent(x0, d0, gamma: float):
    """b0 = gamma * x0 + (1 - gamma) * d0, elementwise."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    if tuple(x0.shape) != tuple(d0.shape):
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(d0.shape)}")
    return gamma * x0 + (1.0 - gamma) * d0


def simple_loss(params, x0, eps, t: int, sched: NoiseSchedule):
    """Diffusion pretraining loss: MSE between eps and the prediction at x_t."""
    x_t = add_noise(x0, eps, t, sched)
    pred = params(x_t, t)
    return ((eps - pred) ** 2).mean()


def trajectory_keep_loss(params, x0, d0_gt, gamma: float, t: int, eps, sched: NoiseSchedule):
    """v-prediction loss on the blended latent b0 = gamma*x0 + (1-gamma)*d0_gt."""
    b0 = blend_latent(x0, d0_gt, gamma)
    b_t = add_noise(b0, eps, t, sched)
    v_t = v_target(b0, eps, t, sched)
    pred = params(b_t, t)
    return ((v_t - pred) ** 2).mean()


def predict_d0(params, x0):
    """One-step feed-forward depth: the denoiser evaluated at the clean image, t=0."""
    return params(x0, 0)


def predict_d_minus1(params, d0):
    """Trajectory extension: the denoiser applied to the depth latent at t=-1."""
    return params(d0, -1)


def mae_loss(d, d_star):
    """Mean absolute difference over all latent elements."""
    if tuple(d.shape) != tuple(d_star.shape):
        raise ValueError(f"shape mismatch: {tuple(d.shape)} vs {tuple(d_star.shape)}")
    return abs(d - d_star).mean()


def gm_loss(d, d_star):
    """Gradient matching on the residual R = d - d_star.

    Forward differences along width and height inside each channel; the result
    is sum(|dx R|) + sum(|dy R|) divided by the total number of difference
    terms. Any constant added to d or d_star leaves the value unchanged.
    """
    if tuple(d.shape) != tuple(d_star.shape):
        raise ValueError(f"shape mismatch: {tuple(d.shape)} vs {tuple(d_star.shape)}")
    shape = tuple(d.shape)
    if len(shape) < 2 or shape[-1] < 2 or shape[-2] < 2:
        raise ValueError(f"gm_loss needs spatial dims >= 2, got shape {shape}")
    r = d - d_star
    dx = abs(r[..., :, 1:] - r[..., :, :-1])
    dy = abs(r[..., 1:, :] - r[..., :-1, :])
    lead = 1
    for s in shape[:-2]:
        lead *= s
    h, w = shape[-2], shape[-1]
    m = lead * (h * (w - 1) + (h - 1) * w)
    return (dx.sum() + dy.sum()) / m


@dataclass
class TrainBatch:
    """Latent-space training batch: a synthetic half with ground-truth depth
    latents and a real half with teacher pseudo-label latents."""

    syn_rgb: torch.Tensor
    syn_depth: torch.Tensor
    real_rgb: torch.Tensor
    real_teacher: torch.Tensor

    def __post_init__(self):
        if self.syn_rgb.shape[0] == 0:
            raise ValueError("synthetic half is empty")
        if self.syn_rgb.shape != self.syn_depth.shape:
            raise ValueError("synthetic rgb/depth latent shapes differ")
        if self.real_rgb.shape[0] and self.real_rgb.shape != self.real_teacher.shape:
            raise ValueError("real rgb/teacher latent shapes differ")


def final_loss(
    params,
    batch: TrainBatch,
    weights: LossWeights,
    sched: NoiseSchedule,
    rng: np.random.Generator,
    *,
    teacher_step: str = "d_minus1",
    use_teacher: bool = True,
    use_traj_keep: bool = True,
    detach_d0: bool = False,
) -> tuple[torch.Tensor, LossBreakdown]:
    """Returns (loss tensor for backward, logged breakdown).

    rng supplies the trajectory-keeping randomness: first the timestep t
    (uniform over [1, T]), then eps. The keyword toggles implement the ablation
    switchboard; with defaults they reproduce the full objective.
    """
    if teacher_step not in ("d_minus1", "d0"):
        raise ValueError(f"unknown teacher_step {teacher_step!r}")
    w = weights
    want_depth_terms = w.lambda_mae > 0 or w.lambda_gm > 0

    t = int(rng.integers(1, sched.T + 1))
    eps_np = rng.standard_normal(tuple(batch.syn_rgb.shape))

    terms = []
    l_mae_t0 = l_gm_t0 = l_mae_tm1 = l_gm_tm1 = l_k = 0.0

    if want_depth_terms:
        d0_syn = predict_d0(params, batch.syn_rgb)
        mae_t0 = mae_loss(d0_syn, batch.syn_depth)
        gm_t0 = gm_loss(d0_syn, batch.syn_depth)
        l_mae_t0, l_gm_t0 = float(mae_t0.detach()), float(gm_t0.detach())
        terms.append(w.lambda_mae * mae_t0 + w.lambda_gm * gm_t0)

        if use_teacher and batch.real_rgb.shape[0]:
            d0_real = predict_d0(params, batch.real_rgb)
            if teacher_step == "d_minus1":
                base = d0_real.detach() if detach_d0 else d0_real
                pred_real = predict_d_minus1(params, base)
            else:
                pred_real = d0_real
            mae_tm1 = mae_loss(pred_real, batch.real_teacher)
            gm_tm1 = gm_loss(pred_real, batch.real_teacher)
            l_mae_tm1, l_gm_tm1 = float(mae_tm1.detach()), float(gm_tm1.detach())
            terms.append(w.lambda_mae * mae_tm1 + w.lambda_gm * gm_tm1)

    if use_traj_keep and w.lambda_k > 0:
        eps = torch.as_tensor(eps_np, dtype=batch.syn_rgb.dtype, device=batch.syn_rgb.device)
        lk = trajectory_keep_loss(
            params, batch.syn_rgb, batch.syn_depth, w.gamma, t, eps, sched
        )
        l_k = float(lk.detach())
        terms.append(w.lambda_k * lk)

    if terms:
        loss = terms[0]
        for extra in terms[1:]:
            loss = loss + extra
    else:
        loss = torch.zeros((), dtype=batch.syn_rgb.dtype, device=batch.syn_rgb.device)

    breakdown = LossBreakdown(
        l_mae_t0=l_mae_t0,
        l_gm_t0=l_gm_t0,
        l_mae_tm1=l_mae_tm1,
        l_gm_tm1=l_gm_tm1,
        l_k=l_k,
        l_final=recompute_final(
            LossBreakdown(l_mae_t0, l_gm_t0, l_mae_tm1, l_gm_tm1, l_k, 0.0), w
        ),
    )
    return loss, breakdown
