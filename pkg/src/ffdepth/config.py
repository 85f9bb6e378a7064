"""Run configuration: a YAML-backed key tree with dotted-path overrides.

The DEFAULTS dict below is the complete documented key set; a config file and
command-line overrides may only touch keys that exist here. Unknown keys are
rejected by name. Coercion follows the type of the default value.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

from .codec import CodecConfig
from .data import CorruptionConfig, SceneGenConfig, TeacherConfig
from .denoiser import ArchDescriptor
from .objective import LossWeights
from .trainer import AblationFlags, TrainConfig


class ConfigError(Exception):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


DEFAULTS = {
    "workers": 1,
    "scene": {
        "image_size": 64,
        "num_primitives": [3, 12],
        "texture_strength": 0.08,
        "synthetic_count": 2000,
        "real_count": 2000,
        "eval_count": 128,
        "seed": 0,
        "corruption": {
            "noise_sigma": 0.03,
            "blur_radius": 1.0,
            "color_jitter": 0.3,
        },
        "teacher": {
            "coarseness": 4.0,
            "noise_amp": 0.01,
        },
    },
    "codec": {
        "mode": "identity",
        "patch_size": 1,
        "seed": 0,
    },
    "arch": {
        "in_channels": 3,
        "widths": [32, 64, 128],
        "time_dim": 64,
    },
    "train": {
        "gamma": 0.5,
        "lambda_mae": 1.0,
        "lambda_gm": 0.5,
        "lambda_k": 0.2,
        "batch_size": 32,
        "iterations": 2000,
        "learning_rate": 3e-4,
        "optimizer": "adam",
        "seed": 0,
        "pretrain_iterations": 1000,
        "T": 1000,
        "beta_start": 1e-4,
        "beta_end": 0.02,
        "checkpoint_interval": 1000,
        "ablation": {
            "no_traj_keep": False,
            "image_only_traj": False,
            "teacher_at_d0": False,
            "no_teacher": False,
            "from_scratch": False,
        },
    },
    "eval": {
        "disparity": False,
    },
    "bench": {
        "sizes": [64, 256],
        "rollout_steps": 20,
        "repeats": 20,
    },
}


def _merge(base: dict, incoming: dict, prefix: str = "") -> None:
    for key, val in incoming.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key '{path}'", key=path)
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key '{path}' expects a mapping", key=path)
            _merge(base[key], val, prefix=f"{path}.")
        else:
            base[key] = _coerce_value(val, base[key], path)
    return None


def _coerce_value(raw, default, path: str):
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if isinstance(raw, str) and raw.lower() in ("true", "false", "1", "0", "yes", "no"):
            return raw.lower() in ("true", "1", "yes")
        raise ConfigError(f"config key '{path}' expects a boolean, got {raw!r}", key=path)
    if isinstance(default, int) and not isinstance(default, bool):
        try:
            if isinstance(raw, str):
                return int(raw, 0)
            if isinstance(raw, float) and raw != int(raw):
                raise ValueError
            return int(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config key '{path}' expects an integer, got {raw!r}", key=path)
    if isinstance(default, float):
        try:
            return float(raw)
        except (TypeError, ValueError):
            raise ConfigError(f"config key '{path}' expects a number, got {raw!r}", key=path)
    if isinstance(default, list):
        if isinstance(raw, str):
            raw = yaml.safe_load(raw if raw.startswith("[") else f"[{raw}]")
        if not isinstance(raw, list):
            raise ConfigError(f"config key '{path}' expects a list, got {raw!r}", key=path)
        elem = default[0] if default else 0
        return [_coerce_value(v, elem, path) for v in raw]
    if isinstance(default, str):
        return str(raw)
    raise ConfigError(f"config key '{path}' has unsupported type", key=path)


def load_config(path=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        data = yaml.safe_load(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config file must hold a mapping")
        _merge(cfg, data)
    return cfg


def apply_override(cfg: dict, dotted: str, raw: str) -> None:
    parts = dotted.split(".")
    node = cfg
    for part in parts[:-1]:
        if not isinstance(node, dict) or part not in node:
            raise ConfigError(f"unknown config key '{dotted}'", key=dotted)
        node = node[part]
    leaf = parts[-1]
    if not isinstance(node, dict) or leaf not in node:
        raise ConfigError(f"unknown config key '{dotted}'", key=dotted)
    if isinstance(node[leaf], dict):
        raise ConfigError(f"config key '{dotted}' is a section, not a value", key=dotted)
    node[leaf] = _coerce_value(raw, node[leaf], dotted)


def dump_config(cfg: dict, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg, sort_keys=True), encoding="utf-8")


# --- typed views -------------------------------------------------------------

def scene_config(cfg: dict) -> SceneGenConfig:
    s = cfg["scene"]
    return SceneGenConfig(
        image_size=s["image_size"],
        num_primitives=tuple(s["num_primitives"]),
        texture_strength=s["texture_strength"],
        corruption=CorruptionConfig(**s["corruption"]),
        teacher=TeacherConfig(**s["teacher"]),
        seed=s["seed"],
    )


def codec_config(cfg: dict) -> CodecConfig:
    return CodecConfig(**cfg["codec"])


def arch_descriptor(cfg: dict) -> ArchDescriptor:
    a = cfg["arch"]
    return ArchDescriptor(in_channels=a["in_channels"], widths=tuple(a["widths"]),
                          time_dim=a["time_dim"])


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        weights=LossWeights(gamma=t["gamma"], lambda_mae=t["lambda_mae"],
                            lambda_gm=t["lambda_gm"], lambda_k=t["lambda_k"]),
        batch_size=t["batch_size"],
        iterations=t["iterations"],
        learning_rate=t["learning_rate"],
        optimizer=t["optimizer"],
        seed=t["seed"],
        ablation=AblationFlags(**t["ablation"]),
        pretrain_iterations=t["pretrain_iterations"],
        T=t["T"],
        beta_start=t["beta_start"],
        beta_end=t["beta_end"],
        arch=arch_descriptor(cfg),
        checkpoint_interval=t["checkpoint_interval"],
    )
