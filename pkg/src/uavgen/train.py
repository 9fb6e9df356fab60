"""Three-stage training loop with resumable, replayable randomness.

Every stochastic choice of step g (task draw, sample seeds, noise, timestep)
comes from a numpy Generator seeded with [run seed, stage, g], so a resumed
run replays the exact step stream of an uninterrupted one; nothing leaks
between steps through hidden RNG state. Stage 1 optimizes the audio branch
alone with the exchange off, stage 2 trains jointly on the paired task,
stage 3 mixes all five tasks at the configured ratios.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .checkpoint import load_model_state, load_optimizer_state, read_checkpoint, save_checkpoint
from .config import RunConfig, print_config
from .data import consistency_score, draw_task, generate_sample
from .errors import ConfigError, OracleFailure, UndefinedScore
from .flow import joint_loss, velocity_loss
from .maskgate import MaskSchedule, mask_loss
from .model import JointModel
from .sampling import euler_sample
from .tasks import CleanBatch, assemble, training_input

METRICS_COLUMNS = ("step", "stage", "loss_video", "loss_audio", "loss_mask",
                   "lambda_mask", "consistency")

_STEP_TAG = 0xDA7A
_PROBE_TAG = 0x9E0B

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass
class TrainResult:
    steps: int
    metrics_path: str
    last_checkpoint: str
    final_consistency: float
    seconds: float


def stage_of(step: int, cfg: RunConfig) -> int:
    """1-based global step -> stage number."""
    s = cfg.schedule
    if step <= s.stage1_steps:
        return 1
    if step <= s.stage1_steps + s.stage2_steps:
        return 2
    return 3


def decay_schedule(cfg: RunConfig) -> MaskSchedule:
    """Mask-loss weight over the joint phase: 0.1 on its first step, exactly
    zero on its last (decay spans the N-1 gaps between N steps)."""
    joint = max(cfg.joint_steps(), 2)
    return MaskSchedule(
        initial=cfg.schedule.mask_weight,
        total_steps=joint - 1,
        mode=cfg.schedule.mask_mode,
    )


def build_optimizer(model: JointModel, cfg: RunConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(),
        lr=cfg.schedule.lr,
        betas=ADAM_BETAS,
        eps=ADAM_EPS,
        weight_decay=cfg.schedule.weight_decay,
    )


def _draw_times(rng: np.random.Generator, n: int, mode: str) -> np.ndarray:
    if mode == "uniform":
        return rng.uniform(0.0, 1.0, size=n)
    u = rng.standard_normal(n)
    return 1.0 / (1.0 + np.exp(-u))


def make_probe_batch(cfg: RunConfig, dtype: torch.dtype) -> CleanBatch:
    """Held-out paired samples scored during training; fixed per run seed."""
    rng = np.random.default_rng([cfg.run.seed, _PROBE_TAG])
    seeds = rng.integers(0, 2**62, size=cfg.schedule.probe_samples)
    data_cfg = cfg.data_config()
    samples = [generate_sample(data_cfg, int(s)) for s in seeds]
    return assemble("JointGen", samples, data_cfg, cfg.model.dim, dtype)


def probe_consistency(model: JointModel, cfg: RunConfig, probe: CleanBatch, step: int) -> float:
    """Mean consistency over the probe batch; nan when every pair degenerates."""
    rng = np.random.default_rng([cfg.run.seed, _PROBE_TAG, step])
    video, audio = euler_sample(
        model, probe, steps=cfg.schedule.probe_steps, scales=cfg.guidance(), rng=rng
    )
    k = cfg.data.audio_tokens
    scores = []
    for b in range(video.shape[0]):
        try:
            scores.append(consistency_score(video[b], audio[b], k))
        except UndefinedScore:
            continue
    return float(np.mean(scores)) if scores else float("nan")


def _format_row(values) -> str:
    out = []
    for v in values:
        out.append(str(v) if isinstance(v, int) else f"{v:.10g}")
    return ",".join(out)


def train_step(
    model: JointModel,
    optimizer: torch.optim.Optimizer,
    cfg: RunConfig,
    step: int,
    schedule: MaskSchedule,
):
    """Run global step `step` (1-based). Returns (stage, lv, la, lm, lam)."""
    s = cfg.schedule
    stage = stage_of(step, cfg)
    rng = np.random.default_rng([cfg.run.seed, stage, step, _STEP_TAG])
    data_cfg = cfg.data_config()
    dtype = cfg.torch_dtype()

    if stage == 3:
        kind = draw_task(rng, cfg.tasks.ratios)
    else:
        kind = "JointGen"
    seeds = rng.integers(0, 2**62, size=s.batch)
    samples = [generate_sample(data_cfg, int(x)) for x in seeds]
    cb = assemble(kind, samples, data_cfg, cfg.model.dim, dtype)

    t = torch.as_tensor(_draw_times(rng, s.batch, s.time_sampling), dtype=dtype)
    noise_v = noise_a = None
    gen_v = cb.clean_video_gen()
    gen_a = cb.clean_audio_gen()
    if gen_v.shape[1]:
        noise_v = torch.as_tensor(rng.standard_normal(tuple(gen_v.shape)), dtype=dtype)
    if gen_a.shape[1]:
        noise_a = torch.as_tensor(rng.standard_normal(tuple(gen_a.shape)), dtype=dtype)

    inp, target_v, target_a = training_input(cb, t, noise_v, noise_a)
    out = model(inp, interaction=(stage != 1))

    lv = velocity_loss(out.video_field, target_v)
    la = velocity_loss(out.audio_field, target_a)
    lm = mask_loss(out.masks, cb.gt_mask)
    if stage == 1:
        lam = 0.0
        loss = la
    else:
        lam = schedule.weight_at(step - s.stage1_steps - 1)
        loss = joint_loss(lv, la, lm, lam)

    loss_val = float(loss.detach())
    if not math.isfinite(loss_val):
        raise OracleFailure(
            f"non-finite loss {loss_val} at step {step} (stage {stage}, task {kind})"
        )
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()

    def scalar(x):
        return float(x.detach()) if torch.is_tensor(x) else float(x)

    return stage, scalar(lv), scalar(la), scalar(lm), lam


def run_training(
    cfg: RunConfig,
    out_dir: Optional[str] = None,
    resume: Optional[str] = None,
    log=None,
) -> TrainResult:
    """Execute the configured stages, writing metrics.csv and checkpoints."""
    t_start = time.monotonic()
    total = cfg.total_steps()
    if total < 1:
        raise ConfigError("no training steps configured")
    out = out_dir or cfg.run.out_dir
    os.makedirs(out, exist_ok=True)
    torch.set_num_threads(cfg.run.threads)

    gen = torch.Generator().manual_seed(cfg.run.seed)
    model = cfg.build_model(gen)
    optimizer = build_optimizer(model, cfg)
    schedule = decay_schedule(cfg)
    config_text = print_config(cfg)

    start = 1
    if resume is not None:
        ckpt = read_checkpoint(resume)
        load_model_state(model, ckpt)
        load_optimizer_state(optimizer, ckpt)
        start = ckpt.step + 1
        if start > total:
            raise ConfigError(f"checkpoint step {ckpt.step} is already past {total} steps")

    probe = make_probe_batch(cfg, cfg.torch_dtype())
    metrics_path = os.path.join(out, "metrics.csv")
    last_ckpt = resume or ""
    consistency = float("nan")
    if resume is not None and start > 1 and (start - 1) % cfg.schedule.probe_every == 0:
        # replay the probe the uninterrupted run carried past this step
        consistency = probe_consistency(model, cfg, probe, start - 1)

    with open(metrics_path, "w", encoding="utf-8") as mf:
        mf.write(",".join(METRICS_COLUMNS) + "\n")
        for step in range(start, total + 1):
            stage, lv, la, lm, lam = train_step(model, optimizer, cfg, step, schedule)
            if step % cfg.schedule.probe_every == 0 or step == total:
                consistency = probe_consistency(model, cfg, probe, step)
            mf.write(_format_row((step, stage, lv, la, lm, lam, consistency)) + "\n")
            mf.flush()
            if step % cfg.schedule.checkpoint_every == 0 or step == total:
                last_ckpt = os.path.join(out, f"ckpt_{step:06d}.uavg")
                save_checkpoint(last_ckpt, model, optimizer, step, config_text)
            if log is not None and (step % 100 == 0 or step == total):
                log(f"step {step}/{total} stage {stage} "
                    f"lv {lv:.4f} la {la:.4f} lm {lm:.4f} score {consistency:.3f}")

    return TrainResult(
        steps=total,
        metrics_path=metrics_path,
        last_checkpoint=last_ckpt,
        final_consistency=consistency,
        seconds=time.monotonic() - t_start,
    )
