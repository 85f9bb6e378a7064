"""Command-line entry point.

One binary with subcommands: gen-data, pretrain, train, infer, eval, ablate,
bench. Every command accepts --config FILE plus dotted-path overrides
(--train.learning_rate 1e-3); unknown keys are rejected by name with exit
code 2. The effective configuration is echoed into each output directory.

Exit codes: 0 success, 1 runtime failure, 2 config or usage error.
"""

from __future__ import annotations

import argparse
import statistics
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint
from .codec import CodecConfig
from .config import (ConfigError, apply_override, codec_config, dump_config,
                     load_config, scene_config, train_config)
from .data import (BatchStream, SceneGenConfig, gen_dataset, read_manifest,
                   read_png, write_dataset)
from .evalkit import benchmark, predict_depth_map, timing_bench
from .pfm import write_pfm
from .trainer import (TrainingDivergedError, pretrain, rebuild_codec_config,
                      rebuild_model, train)

ABLATION_PRESETS = ("full", "no_traj_keep", "image_only_traj", "teacher_at_d0",
                    "no_teacher")


def _find_manifest(data_dir) -> Path:
    p = Path(data_dir)
    if p.is_file():
        return p
    manifest = p / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt under {p}")
    return manifest


def _echo_config(cfg: dict, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config_effective.yaml")


def _depth_preview(depth: np.ndarray) -> np.ndarray:
    lo, hi = float(depth.min()), float(depth.max())
    span = hi - lo if hi > lo else 1.0
    return np.round((depth - lo) / span * 255.0).astype(np.uint8)


def cmd_gen_data(args, cfg) -> int:
    out = Path(args.out)
    _echo_config(cfg, out)
    scfg = scene_config(cfg)
    samples = gen_dataset(scfg, cfg["scene"]["synthetic_count"], cfg["scene"]["real_count"])
    manifest = write_dataset(samples, out, scfg)
    print(manifest)
    return 0


def cmd_pretrain(args, cfg) -> int:
    out = Path(args.out)
    _echo_config(cfg, out)
    rows, _ = read_manifest(_find_manifest(args.data))
    tcfg = train_config(cfg)
    stream = BatchStream(rows, tcfg.batch_size, codec_config(cfg), tcfg.seed)
    pretrain(tcfg, stream, out_dir=out)
    print(out / "pretrain.zip")
    return 0


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    _echo_config(cfg, out)
    rows, _ = read_manifest(_find_manifest(args.data))
    tcfg = train_config(cfg)
    init = None
    if args.init is not None:
        init = load_checkpoint(args.init)
    elif not tcfg.ablation.from_scratch:
        raise ConfigError("--init checkpoint required unless train.ablation.from_scratch")
    stream = BatchStream(rows, tcfg.batch_size, codec_config(cfg), tcfg.seed)
    train(tcfg, stream, init, out)
    print(out / "final.zip")
    return 0


def cmd_infer(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = load_checkpoint(args.checkpoint)
    model = rebuild_model(ckpt)
    model.eval()
    ccfg = rebuild_codec_config(ckpt)
    src = Path(args.input)
    images = sorted(src.glob("*.png")) if src.is_dir() else [src]
    if not images:
        raise FileNotFoundError(f"no PNG images at {src}")
    from PIL import Image
    for path in images:
        pred = predict_depth_map(model, read_png(path), ccfg)
        write_pfm(out / f"{path.stem}_depth.pfm", pred.data.astype(np.float32))
        Image.fromarray(_depth_preview(pred.data), mode="L").save(
            out / f"{path.stem}_depth.png")
    print(f"wrote {len(images)} depth maps to {out}")
    return 0


def cmd_eval(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = rebuild_model(ckpt)
    model.eval()
    ccfg = rebuild_codec_config(ckpt)
    rows, _ = read_manifest(_find_manifest(args.data))
    report = benchmark(model, rows, ccfg, disparity=cfg["eval"]["disparity"])
    report_path = Path(args.report)
    report_path.parent.mkdir(parents=True, exist_ok=True)
    report.write(report_path, csv_path=args.csv)
    for line in report.to_lines():
        print(line)
    return 0


def _preset_overrides(preset: str) -> dict:
    if preset == "full":
        return {}
    return {preset: True}


def cmd_ablate(args, cfg) -> int:
    from dataclasses import replace

    out = Path(args.out)
    _echo_config(cfg, out)
    rows, _ = read_manifest(_find_manifest(args.data))
    base = train_config(cfg)
    ccfg = codec_config(cfg)

    # held-out eval split: same generator family, disjoint stream
    scfg = scene_config(cfg)
    eval_cfg = SceneGenConfig(
        image_size=scfg.image_size, num_primitives=scfg.num_primitives,
        texture_strength=scfg.texture_strength, corruption=scfg.corruption,
        teacher=scfg.teacher, seed=scfg.seed + 7919,
    )
    n_eval = cfg["scene"]["eval_count"]
    eval_dir = out / "eval_data"
    eval_manifest = eval_dir / "manifest.txt"
    if not eval_manifest.exists():
        write_dataset(gen_dataset(eval_cfg, n_eval, n_eval), eval_dir, eval_cfg)
    eval_rows, _ = read_manifest(eval_manifest)

    seeds = [base.seed + k for k in range(args.seeds)]
    table_rows = []
    for seed in seeds:
        seed_cfg = replace(base, seed=seed)
        stream = BatchStream(rows, seed_cfg.batch_size, ccfg, seed)
        phase_a = pretrain(seed_cfg, stream, out_dir=out / f"seed{seed}" / "pretrain")
        for preset in ABLATION_PRESETS:
            flags = replace(seed_cfg.ablation, **_preset_overrides(preset))
            run_cfg = replace(seed_cfg, ablation=flags)
            run_dir = out / f"seed{seed}" / preset
            final = train(run_cfg, stream, phase_a, run_dir)
            model = rebuild_model(final)
            model.eval()
            report = benchmark(model, eval_rows, ccfg)
            agg = report.aggregates
            table_rows.append({
                "preset": preset, "seed": seed,
                "syn_abs_rel": agg["synthetic.abs_rel"],
                "syn_delta1": agg["synthetic.delta1"],
                "syn_gradient_error": agg["synthetic.gradient_error"],
                "real_abs_rel": agg["real.abs_rel"],
                "real_delta1": agg["real.delta1"],
                "real_gradient_error": agg["real.gradient_error"],
            })

    cols = list(table_rows[0])
    lines = ["\t".join(cols)]
    for row in table_rows:
        lines.append("\t".join(str(row[c]) for c in cols))
    lines.append("")
    lines.append("# per-preset medians over seeds")
    for preset in ABLATION_PRESETS:
        sub = [r for r in table_rows if r["preset"] == preset]
        med = [preset, "median"] + [
            repr(statistics.median(r[c] for r in sub)) for c in cols[2:]
        ]
        lines.append("\t".join(med))
    table = out / "ablation_table.txt"
    table.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_bench(args, cfg) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = rebuild_model(ckpt)
    model.eval()
    sizes = [int(s) for s in args.sizes.split(",")] if args.sizes else cfg["bench"]["sizes"]
    lines = []
    for size in sizes:
        rep = timing_bench(model, size, cfg["bench"]["repeats"],
                           rollout_steps=cfg["bench"]["rollout_steps"])
        lines.extend(rep.to_lines())
        lines.append("")
    text = "\n".join(lines).rstrip() + "\n"
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ffdepth",
        description="One-step feed-forward depth estimation from a toy diffusion model",
    )
    parser.add_argument("--config", default=None, help="YAML config file")
    parser.add_argument("--workers", type=int, default=1,
                        help="torch intra-op threads (1 = reproducible)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic+real dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="phase A: diffusion pretraining")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="phase B: depth fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--init", default=None, help="phase A checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="one-step depth for a PNG file or directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metrics on a dataset with ground truth")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--csv", default=None, help="optional per-image CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="ablation presets x seeds comparison table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="single-pass vs K-step rollout timing")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sizes", default=None, help="comma-separated image sizes")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_bench)
    return parser


def _parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    pairs = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, val = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"override '--{key}' is missing a value", key=key)
            val = extra[i + 1]
            i += 2
        if "." not in key:
            raise ConfigError(f"unknown argument '--{key}'", key=key)
        pairs.append((key, val))
    return pairs


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        cfg = load_config(args.config)
        for key, val in _parse_overrides(extra):
            apply_override(cfg, key, val)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    torch.set_num_threads(max(1, args.workers))
    try:
        return args.func(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainingDivergedError, CheckpointError, FileNotFoundError, OSError,
            ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
