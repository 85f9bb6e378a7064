"""Affine-invariant depth evaluation and the single-pass vs. iterative timing
harness.

Predictions come out of the decoder in normalized affine-invariant units, so
every metric first solves the closed-form least-squares (scale, shift) that
maps the prediction onto ground truth. Aligned predictions are clamped to a
small positive floor (1e-6) before the ratio metrics; a constant prediction
has no defined scale, in which case the benchmark falls back to the best
constant fit (scale 0, shift mean of GT) and flags the row as degenerate.

Alignment runs in depth space by default; pass disparity=True to align and
score in 1/depth space instead. gradient_error shares the forward-difference
discretization of the training gradient-matching loss and serves as the
sharpness proxy referenced by the ablation claims.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .codec import (CodecConfig, DegenerateInputError, DepthMap, decode_depth,
                    encode_image)
from .data import ManifestRow, load_depth, read_png
from .schedule import NoiseSchedule, add_noise, make_linear_schedule, noise_from_v, recover_b0

POSITIVE_FLOOR = 1e-6


def _masked_pair(pred: DepthMap, gt: DepthMap) -> tuple[np.ndarray, np.ndarray]:
    if pred.data.shape != gt.data.shape:
        raise ValueError(f"shape mismatch: {pred.data.shape} vs {gt.data.shape}")
    mask = pred.valid_mask & gt.valid_mask
    if not mask.any():
        raise ValueError("no valid pixels in common")
    return pred.data[mask].astype(np.float64), gt.data[mask].astype(np.float64)


def align_affine(pred: DepthMap, gt: DepthMap) -> tuple[float, float]:
    """Least-squares (scale, shift) minimizing sum((s*pred + b - gt)^2) over
    the valid intersection; closed-form normal equations."""
    p, g = _masked_pair(pred, gt)
    if p.size < 2:
        raise ValueError("alignment needs at least 2 valid pixels")
    var_p = np.var(p)
    if var_p < 1e-18:
        raise DegenerateInputError("constant prediction: scale is undefined")
    if np.var(g) < 1e-18:
        raise DegenerateInputError("constant ground truth")
    s = float(np.mean((p - p.mean()) * (g - g.mean())) / var_p)
    b = float(g.mean() - s * p.mean())
    return s, b


def abs_rel(pred_aligned: DepthMap, gt: DepthMap) -> float:
    """Mean over valid pixels of |pred - gt| / gt."""
    p, g = _masked_pair(pred_aligned, gt)
    p = np.maximum(p, POSITIVE_FLOOR)
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred_aligned: DepthMap, gt: DepthMap) -> float:
    """Fraction of valid pixels with max(pred/gt, gt/pred) < 1.25."""
    p, g = _masked_pair(pred_aligned, gt)
    p = np.maximum(p, POSITIVE_FLOOR)
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < 1.25))


def gradient_error(pred_aligned: DepthMap, gt: DepthMap) -> float:
    """Mean |forward difference| of the residual, x and y, over term pairs
    whose both endpoints are valid. Same discretization as the training
    gradient-matching loss."""
    if pred_aligned.data.shape != gt.data.shape:
        raise ValueError("shape mismatch")
    h, w = gt.data.shape
    if h < 2 or w < 2:
        raise ValueError("gradient_error needs spatial dims >= 2")
    mask = pred_aligned.valid_mask & gt.valid_mask
    r = pred_aligned.data.astype(np.float64) - gt.data.astype(np.float64)
    vx = mask[:, 1:] & mask[:, :-1]
    vy = mask[1:, :] & mask[:-1, :]
    m = int(vx.sum()) + int(vy.sum())
    if m == 0:
        raise ValueError("no valid difference terms")
    dx = np.abs(r[:, 1:] - r[:, :-1])[vx].sum()
    dy = np.abs(r[1:, :] - r[:-1, :])[vy].sum()
    return float((dx + dy) / m)


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)
    n_samples: int = 0
    n_skipped: int = 0
    meta: dict = field(default_factory=dict)

    def to_lines(self) -> list[str]:
        lines = [f"n_samples={self.n_samples}", f"n_skipped={self.n_skipped}"]
        for k in sorted(self.meta):
            lines.append(f"{k}={self.meta[k]}")
        for k in sorted(self.aggregates):
            lines.append(f"{k}={self.aggregates[k]!r}")
        return lines

    def write(self, path, csv_path=None) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n", encoding="utf-8")
        if csv_path is not None and self.rows:
            cols = list(self.rows[0])
            out = [",".join(cols)]
            for row in self.rows:
                out.append(",".join(str(row[c]) for c in cols))
            Path(csv_path).write_text("\n".join(out) + "\n", encoding="utf-8")


_METRIC_KEYS = ("abs_rel", "delta1", "gradient_error")


def _aggregate(rows: list[dict]) -> dict:
    agg = {}
    domains = sorted({r["domain"] for r in rows})
    for key in _METRIC_KEYS:
        agg[key] = float(np.mean([r[key] for r in rows]))
        for d in domains:
            sub = [r[key] for r in rows if r["domain"] == d]
            if sub:
                agg[f"{d}.{key}"] = float(np.mean(sub))
    agg["degenerate_fraction"] = float(np.mean([r["degenerate"] for r in rows]))
    return agg


def evaluate_prediction(pred: DepthMap, gt: DepthMap, disparity: bool = False) -> dict:
    """Align and score one prediction; returns the per-image metric row."""
    if disparity:
        gt = DepthMap(1.0 / np.maximum(gt.data, POSITIVE_FLOOR), gt.valid_mask)
        pred = DepthMap(pred.data, pred.valid_mask)
    degenerate = 0
    try:
        s, b = align_affine(pred, gt)
    except DegenerateInputError:
        g, _ = _masked_pair(gt, gt)
        s, b = 0.0, float(g.mean())
        degenerate = 1
    aligned = DepthMap(s * pred.data + b, pred.valid_mask)
    return {
        "abs_rel": abs_rel(aligned, gt),
        "delta1": delta1(aligned, gt),
        "gradient_error": gradient_error(aligned, gt),
        "degenerate": degenerate,
        "scale": s,
        "shift": b,
    }


def predict_depth_map(model, img, codec_cfg: CodecConfig) -> DepthMap:
    """encode -> t=0 forward pass -> decode, on one image."""
    z = encode_image(img, codec_cfg)
    with torch.no_grad():
        zt = torch.as_tensor(z, dtype=next(model.parameters()).dtype)
        d_latent = model(zt[None], 0)[0].cpu().numpy().astype(np.float64)
    return decode_depth(d_latent, codec_cfg)


def benchmark(model, rows: list[ManifestRow], codec_cfg: CodecConfig,
              disparity: bool = False) -> EvalReport:
    """Per-sample: encode RGB, one-step depth, decode, align, score."""
    report = EvalReport(meta={
        "alignment_space": "disparity" if disparity else "depth",
        "positive_floor": POSITIVE_FLOOR,
        "sharpness_proxy": "gradient_error (not a boundary metric)",
    })
    usable = [r for r in rows if r.depth_path is not None]
    report.n_skipped = len(rows) - len(usable)
    if not usable:
        raise ValueError("no samples with ground-truth depth to evaluate")
    t_start = time.perf_counter()
    for row in usable:
        pred = predict_depth_map(model, read_png(row.rgb_path), codec_cfg)
        gt = load_depth(row.depth_path)
        entry = {"id": row.id, "domain": row.domain}
        entry.update(evaluate_prediction(pred, gt, disparity=disparity))
        report.rows.append(entry)
    report.n_samples = len(report.rows)
    report.aggregates = _aggregate(report.rows)
    report.meta["wall_s_total"] = round(time.perf_counter() - t_start, 3)
    return report


# --- timing ------------------------------------------------------------------


@dataclass
class TimingReport:
    image_size: int
    repeats: int
    rollout_steps: int
    single_pass_ms: float
    rollout_ms: float
    low_confidence: bool

    @property
    def speedup(self) -> float:
        return self.rollout_ms / self.single_pass_ms

    def to_lines(self) -> list[str]:
        return [
            f"image_size={self.image_size}",
            f"repeats={self.repeats}",
            f"rollout_steps={self.rollout_steps}",
            f"single_pass_ms={self.single_pass_ms!r}",
            f"rollout_ms={self.rollout_ms!r}",
            f"speedup={self.speedup!r}",
            f"low_confidence={self.low_confidence}",
        ]


def rollout(model, z0: torch.Tensor, steps: int, sched: NoiseSchedule) -> torch.Tensor:
    """Deterministic K-step denoising of the image latent, v-parameterization
    state updates at K descending timesteps; the multi-step baseline the
    single pass is compared against."""
    if steps < 1:
        raise ValueError("rollout needs at least 1 step")
    ts = np.unique(np.round(np.linspace(sched.T, 1, steps)).astype(int))[::-1]
    z = z0
    for idx, t in enumerate(ts):
        t = int(t)
        v = model(z, t)
        b0 = recover_b0(z, v, t, sched)
        if idx + 1 < len(ts):
            eps = noise_from_v(z, v, t, sched)
            z = add_noise(b0, eps, int(ts[idx + 1]), sched)
        else:
            z = b0
    return z


def timing_bench(model, image_size: int, repeats: int, rollout_steps: int = 20,
                 sched: NoiseSchedule | None = None, warmup: int = 2) -> TimingReport:
    """Median wall-clock of the single t=0 pass vs a K-step rollout."""
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    if sched is None:
        sched = make_linear_schedule(1000)
    cin = model.arch.in_channels
    rng = np.random.default_rng(0)
    z = torch.as_tensor(
        rng.standard_normal((1, cin, image_size, image_size)),
        dtype=next(model.parameters()).dtype,
    )
    with torch.no_grad():
        for _ in range(warmup):
            model(z, 0)
            rollout(model, z, rollout_steps, sched)
        singles, rolls = [], []
        for _ in range(repeats):
            t0 = time.perf_counter()
            model(z, 0)
            singles.append((time.perf_counter() - t0) * 1e3)
            t0 = time.perf_counter()
            rollout(model, z, rollout_steps, sched)
            rolls.append((time.perf_counter() - t0) * 1e3)
    return TimingReport(
        image_size=image_size,
        repeats=repeats,
        rollout_steps=rollout_steps,
        single_pass_ms=statistics.median(singles),
        rollout_ms=statistics.median(rolls),
        low_confidence=repeats < 5,
    )
