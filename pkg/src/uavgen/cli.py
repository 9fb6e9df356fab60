"""Command-line surface: train, sample, check, ablate, plot, gen-data.

Every command honors --seed (overriding the config; the UAVGEN_SEED
environment variable fills in when the flag is absent) and --deterministic,
which pins the math to one thread so reduction order is fixed. UAVGEN_THREADS
sets the thread count when determinism is not requested.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np
import torch

from .ablate import default_cells, run_ablation, select_cells
from .checkpoint import load_model_state, read_checkpoint
from .checks import format_results, run_checks
from .config import RunConfig, load_config, parse_config, print_config
from .data import TASK_KINDS, consistency_score, generate_sample
from .errors import ConfigError, FormatError, OracleFailure, ShapeError, UndefinedScore
from .sampling import GuidanceScales, euler_sample
from .tasks import assemble
from .tensorio import write_shard, write_tensor
from .train import run_training

_SAMPLE_TAG = 0x5A3D


def _env_int(name: str) -> Optional[int]:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}")


def _resolve_seed(flag: Optional[int]) -> Optional[int]:
    return flag if flag is not None else _env_int("UAVGEN_SEED")


def _apply_threads(deterministic: bool, cfg: Optional[RunConfig] = None) -> None:
    if deterministic:
        threads = 1
    else:
        threads = _env_int("UAVGEN_THREADS") or (cfg.run.threads if cfg else 1)
    torch.set_num_threads(threads)
    if cfg is not None:
        cfg.run.threads = threads


def _load_run_config(path: str, seed: Optional[int]) -> RunConfig:
    cfg = load_config(path)
    if seed is not None:
        cfg.run.seed = seed
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, _resolve_seed(args.seed))
    _apply_threads(args.deterministic, cfg)
    result = run_training(
        cfg,
        out_dir=args.out,
        resume=args.resume,
        log=(None if args.quiet else print),
    )
    print(f"trained {result.steps} steps in {result.seconds:.1f}s")
    print(f"metrics: {result.metrics_path}")
    print(f"checkpoint: {result.last_checkpoint}")
    print(f"final probe consistency: {result.final_consistency:.6g}")
    return 0


def cmd_sample(args) -> int:
    seed = _resolve_seed(args.seed)
    seed = 0 if seed is None else seed
    ckpt = read_checkpoint(args.checkpoint)
    cfg = parse_config(ckpt.config_text)
    _apply_threads(args.deterministic, cfg)
    model = cfg.build_model(torch.Generator().manual_seed(cfg.run.seed))
    load_model_state(model, ckpt)

    if args.task not in TASK_KINDS:
        raise ConfigError(f"unknown task {args.task!r}; choose from {TASK_KINDS}")
    steps = args.steps or cfg.sampler.steps
    scales = GuidanceScales(
        video=cfg.sampler.scale_video if args.scale_video is None else args.scale_video,
        audio=cfg.sampler.scale_audio if args.scale_audio is None else args.scale_audio,
    )
    data_cfg = cfg.data_config()
    rng = np.random.default_rng([seed, _SAMPLE_TAG])
    sample_seeds = rng.integers(0, 2**62, size=args.batch)
    samples = [generate_sample(data_cfg, int(s)) for s in sample_seeds]
    cb = assemble(args.task, samples, data_cfg, cfg.model.dim, cfg.torch_dtype())
    video, audio = euler_sample(
        model, cb, steps=steps, scales=scales,
        rng=np.random.default_rng([seed, _SAMPLE_TAG, 1]),
    )

    os.makedirs(args.out, exist_ok=True)
    video_path = os.path.join(args.out, "video.uavt")
    audio_path = os.path.join(args.out, "audio.uavt")
    write_tensor(video_path, video)
    write_tensor(audio_path, audio)
    report_path = os.path.join(args.out, "report.jsonl")
    with open(report_path, "w", encoding="utf-8") as fh:
        for b in range(video.shape[0]):
            try:
                score = consistency_score(video[b], audio[b], data_cfg.audio_tokens)
            except UndefinedScore:
                score = None
            fh.write(json.dumps({
                "row": b,
                "task": args.task,
                "seed": seed,
                "steps": steps,
                "scale_video": scales.video,
                "scale_audio": scales.audio,
                "consistency": score,
            }) + "\n")
    print(f"wrote {video_path}, {audio_path}, {report_path}")
    return 0


def cmd_check(args) -> int:
    _apply_threads(args.deterministic)
    seed = _resolve_seed(args.seed)
    results = run_checks(
        precision=args.precision,
        corrupt_zero_init=args.corrupt_zero_init,
        seed=0 if seed is None else seed,
    )
    print(format_results(results))
    return 0 if all(r.ok for r in results) else 1


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args.config, None)
    _apply_threads(args.deterministic, cfg)
    cells = select_cells(args.cells.split(",")) if args.cells else default_cells()
    seed = _resolve_seed(args.seed)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [0, 1, 2]
    if seed is not None:
        seeds = [seed + i for i in range(len(seeds))]
    rows = run_ablation(
        cfg, args.out, cells=cells, seeds=seeds,
        eval_samples=args.eval_samples,
        log=(None if args.quiet else print),
    )
    print(f"wrote {os.path.join(args.out, 'ablation.csv')} ({len(rows)} rows)")
    return 0


def cmd_plot(args) -> int:
    from .plots import plot_ablation, plot_training

    if args.kind == "train":
        plot_training(args.metrics, args.out)
    else:
        plot_ablation(args.metrics, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args.config, None)
    seed = _resolve_seed(args.seed)
    seed = 0 if seed is None else seed
    seeds = [seed + i for i in range(args.count)]
    write_shard(args.out, cfg.data_config(), seeds)
    print(f"wrote {args.out} ({args.count} samples, seeds {seeds[0]}..{seeds[-1]})")
    return 0


def cmd_show_config(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    sys.stdout.write(print_config(cfg))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uavgen",
        description="Dual-branch joint audio-video generation at desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=None,
                       help="override the run seed (UAVGEN_SEED when omitted)")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded math with fixed reduction order")

    p = sub.add_parser("train", help="run the configured training stages")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="output directory (default: run.out_dir)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--quiet", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="generate latents from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", default="JointGen")
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--scale-video", type=float, default=None)
    p.add_argument("--scale-audio", type=float, default=None)
    p.add_argument("--out", default="samples")
    common(p)
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("check", help="run the invariant suite")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--corrupt-zero-init", action="store_true",
                   help="negative control: break the silent-init invariant first")
    common(p)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("ablate", help="train the topology/gating matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default="ablation")
    p.add_argument("--cells", default=None,
                   help="comma-separated cell names (default: full matrix)")
    p.add_argument("--seeds", default=None, help="comma-separated seeds (default 0,1,2)")
    p.add_argument("--eval-samples", type=int, default=16)
    p.add_argument("--quiet", action="store_true")
    common(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="render metrics or ablation figures")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("train", "ablation"), default="train")
    common(p)
    p.set_defaults(fn=cmd_plot)

    p = sub.add_parser("gen-data", help="write a synthetic dataset shard")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("show-config", help="print a config (defaults when no --config)")
    p.add_argument("--config", default=None)
    common(p)
    p.set_defaults(fn=cmd_show_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FormatError, ShapeError, OracleFailure, UndefinedScore,
            FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
