"""Two-phase training driver.

Phase A pretrains the denoiser as an ordinary image diffusion model
(simple_loss on synthetic RGB latents). Phase B fine-tunes it into a depth
predictor with the combined objective, honoring the ablation switchboard:

- no_traj_keep     drop the trajectory-keeping term (lambda_k := 0 path)
- image_only_traj  keep the trajectory on pure image latents (gamma := 1)
- teacher_at_d0    apply teacher supervision to d0 instead of d-1
- no_teacher       drop the real half and its t=-1 terms entirely
- from_scratch     skip phase A initialization

All per-iteration randomness is derived statelessly from (seed, phase,
iteration), so training is bit-reproducible in single-threaded mode and a run
resumed from a checkpoint continues exactly where it left off. The training
log has one tab-separated line per iteration:

    iter  l_mae_t0  l_gm_t0  l_mae_tm1  l_gm_tm1  l_k  l_final

with floats written via repr so the bookkeeping identity of l_final is
checkable from the log alone.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import CodecConfig
from .data import BatchStream
from .denoiser import ArchDescriptor, Denoiser, init_params
from .objective import (LossBreakdown, LossWeights, TrainBatch, final_loss,
                        simple_loss)
from .schedule import NoiseSchedule, make_linear_schedule

_PHASE_A_STREAM = 0xA
_PHASE_B_STREAM = 0xB


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, last_checkpoint: Path | None = None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint


@dataclass(frozen=True)
class AblationFlags:
    no_traj_keep: bool = False
    image_only_traj: bool = False
    teacher_at_d0: bool = False
    no_teacher: bool = False
    from_scratch: bool = False

    def __post_init__(self):
        if self.teacher_at_d0 and self.no_teacher:
            raise ValueError("teacher_at_d0 and no_teacher are mutually exclusive")


@dataclass(frozen=True)
class TrainConfig:
    weights: LossWeights = LossWeights()
    batch_size: int = 32
    iterations: int = 2000
    learning_rate: float = 3e-4
    optimizer: str = "adam"
    seed: int = 0
    ablation: AblationFlags = AblationFlags()
    pretrain_iterations: int = 1000
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    arch: ArchDescriptor = ArchDescriptor()
    checkpoint_interval: int = 1000

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError("batch_size must be even and >= 2")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.iterations < 0 or self.pretrain_iterations < 0:
            raise ValueError("iteration counts must be nonnegative")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}")
        if self.checkpoint_interval < 1:
            raise ValueError("checkpoint_interval must be >= 1")


def effective_weights(cfg: TrainConfig) -> LossWeights:
    """Ablation flags reduced to weight substitutions."""
    w = cfg.weights
    return LossWeights(
        gamma=1.0 if cfg.ablation.image_only_traj else w.gamma,
        lambda_mae=w.lambda_mae,
        lambda_gm=w.lambda_gm,
        lambda_k=0.0 if cfg.ablation.no_traj_keep else w.lambda_k,
    )


def config_hash(cfg: TrainConfig) -> str:
    return hashlib.sha256(
        json.dumps(asdict(cfg), sort_keys=True, default=str).encode()
    ).hexdigest()[:16]


def make_schedule(cfg: TrainConfig) -> NoiseSchedule:
    return make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)


def _iteration_rng(seed: int, stream: int, iteration: int) -> np.random.Generator:
    return np.random.default_rng((int(seed), stream, int(iteration)))


def _format_line(i: int, b: LossBreakdown) -> str:
    vals = [b.l_mae_t0, b.l_gm_t0, b.l_mae_tm1, b.l_gm_tm1, b.l_k, b.l_final]
    return "\t".join([str(i)] + [repr(float(v)) for v in vals])


def parse_log(path) -> list[tuple[int, LossBreakdown]]:
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        out.append((int(parts[0]), LossBreakdown(*[float(p) for p in parts[1:7]])))
    return out


# --- checkpoint <-> torch plumbing -----------------------------------------

def _model_tensors(model: Denoiser) -> dict[str, np.ndarray]:
    return {
        f"model/{name}": p.detach().cpu().numpy().copy()
        for name, p in model.state_dict().items()
    }


def _optimizer_tensors(model: Denoiser, opt: torch.optim.Adam) -> dict[str, np.ndarray]:
    names = [n for n, _ in model.named_parameters()]
    tensors = {}
    state = opt.state_dict()["state"]
    for idx, entry in state.items():
        for key, val in entry.items():
            if not torch.is_tensor(val):
                raise AssertionError(f"non-tensor optimizer state {key!r}")
            tensors[f"opt/{names[idx]}/{key}"] = val.detach().cpu().numpy().copy()
    return tensors


def build_checkpoint(model: Denoiser, opt: torch.optim.Adam | None, cfg: TrainConfig,
                     codec_cfg: CodecConfig, iteration: int, phase: str) -> Checkpoint:
    manifest = {
        "iteration": int(iteration),
        "phase": phase,
        "config_hash": config_hash(cfg),
        "arch": {
            "in_channels": cfg.arch.in_channels,
            "widths": list(cfg.arch.widths),
            "time_dim": cfg.arch.time_dim,
        },
        "schedule": {"T": cfg.T, "beta_start": cfg.beta_start, "beta_end": cfg.beta_end},
        "codec": {"mode": codec_cfg.mode, "patch_size": codec_cfg.patch_size,
                  "seed": codec_cfg.seed},
        "optimizer": {"name": cfg.optimizer, "learning_rate": cfg.learning_rate},
        "train_seed": cfg.seed,
    }
    tensors = _model_tensors(model)
    if opt is not None:
        tensors.update(_optimizer_tensors(model, opt))
    return Checkpoint(manifest=manifest, tensors=tensors)


def rebuild_arch(ckpt: Checkpoint) -> ArchDescriptor:
    a = ckpt.manifest["arch"]
    return ArchDescriptor(in_channels=a["in_channels"], widths=tuple(a["widths"]),
                          time_dim=a["time_dim"])


def rebuild_model(ckpt: Checkpoint) -> Denoiser:
    model = Denoiser(rebuild_arch(ckpt))
    state = {}
    for name, p in model.state_dict().items():
        key = f"model/{name}"
        if key not in ckpt.tensors:
            raise KeyError(f"checkpoint lacks tensor {key}")
        state[name] = torch.from_numpy(ckpt.tensors[key]).to(p.dtype)
    model.load_state_dict(state)
    return model


def rebuild_schedule(ckpt: Checkpoint) -> NoiseSchedule:
    s = ckpt.manifest["schedule"]
    return make_linear_schedule(s["T"], s["beta_start"], s["beta_end"])


def rebuild_codec_config(ckpt: Checkpoint) -> CodecConfig:
    c = ckpt.manifest["codec"]
    return CodecConfig(mode=c["mode"], patch_size=c["patch_size"], seed=c["seed"])


def _restore_optimizer(model: Denoiser, opt: torch.optim.Adam, ckpt: Checkpoint) -> None:
    names = [n for n, _ in model.named_parameters()]
    opt_keys = [k for k in ckpt.tensors if k.startswith("opt/")]
    if not opt_keys:
        return
    state: dict[int, dict] = {}
    for key in opt_keys:
        _, pname, skey = key.split("/", 2)
        idx = names.index(pname)
        arr = ckpt.tensors[key]
        state.setdefault(idx, {})[skey] = torch.from_numpy(arr.copy())
    sd = opt.state_dict()
    sd["state"] = state
    opt.load_state_dict(sd)


# --- training loops ---------------------------------------------------------

def _check_finite(value: float, iteration: int, last_ckpt: Path | None) -> None:
    if not math.isfinite(value):
        where = f"; last good checkpoint: {last_ckpt}" if last_ckpt else ""
        raise TrainingDivergedError(
            f"non-finite loss {value} at iteration {iteration}{where}", last_ckpt
        )


def pretrain(cfg: TrainConfig, stream: BatchStream, out_dir=None) -> Checkpoint:
    """Phase A: diffusion pretraining with simple_loss on synthetic image latents."""
    sched = make_schedule(cfg)
    model = init_params(cfg.arch, cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    out = Path(out_dir) if out_dir is not None else None
    log_lines = []
    for i in range(cfg.pretrain_iterations):
        rng = _iteration_rng(cfg.seed, _PHASE_A_STREAM, i)
        x0 = stream.image_batch(i, cfg.batch_size)
        t = int(rng.integers(1, sched.T + 1))
        eps = torch.as_tensor(rng.standard_normal(tuple(x0.shape)), dtype=x0.dtype)
        loss = simple_loss(model, x0, eps, t, sched)
        val = float(loss.detach())
        _check_finite(val, i, None)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log_lines.append(f"{i}\t{repr(val)}")
    ckpt = build_checkpoint(model, None, cfg, stream.codec_cfg,
                            cfg.pretrain_iterations, "A")
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "pretrain_log.txt").write_text("\n".join(log_lines) + ("\n" if log_lines else ""))
        save_checkpoint(ckpt, out / "pretrain.zip")
    return ckpt


def train_step(model: Denoiser, opt: torch.optim.Adam, batch: TrainBatch,
               cfg: TrainConfig, sched: NoiseSchedule,
               rng: np.random.Generator) -> tuple[Denoiser, LossBreakdown]:
    fl = cfg.ablation
    loss, breakdown = final_loss(
        model, batch, effective_weights(cfg), sched, rng,
        teacher_step="d0" if fl.teacher_at_d0 else "d_minus1",
        use_teacher=not fl.no_teacher,
        use_traj_keep=not fl.no_traj_keep,
    )
    opt.zero_grad(set_to_none=True)
    if loss.requires_grad:
        loss.backward()
    opt.step()
    return model, breakdown


def train(cfg: TrainConfig, stream: BatchStream, init: Checkpoint | None,
          out_dir) -> Checkpoint:
    """Phase B fine-tuning. init must be a phase A checkpoint (or None with
    from_scratch); a phase B checkpoint resumes at its stored iteration."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sched = make_schedule(cfg)

    start = 0
    if cfg.ablation.from_scratch or init is None:
        if not cfg.ablation.from_scratch and init is None:
            raise ValueError("train requires an init checkpoint unless from_scratch is set")
        model = init_params(cfg.arch, cfg.seed)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    else:
        model = rebuild_model(init)
        opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
        if init.phase == "B":
            start = init.iteration
            _restore_optimizer(model, opt, init)

    log_path = out / "train_log.txt"
    mode = "a" if start else "w"
    last_ckpt: Path | None = None
    with open(log_path, mode, encoding="utf-8") as logf:
        for i in range(start, cfg.iterations):
            rng = _iteration_rng(cfg.seed, _PHASE_B_STREAM, i)
            batch = stream.batch(i)
            model, breakdown = train_step(model, opt, batch, cfg, sched, rng)
            _check_finite(breakdown.l_final, i, last_ckpt)
            logf.write(_format_line(i, breakdown) + "\n")
            done = i + 1
            if done % cfg.checkpoint_interval == 0 and done < cfg.iterations:
                ckpt = build_checkpoint(model, opt, cfg, stream.codec_cfg, done, "B")
                last_ckpt = save_checkpoint(ckpt, out / f"ckpt_{done:06d}.zip")
    final = build_checkpoint(model, opt, cfg, stream.codec_cfg, cfg.iterations, "B")
    save_checkpoint(final, out / "final.zip")
    return final
