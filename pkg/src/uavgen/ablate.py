"""Ablation harness: interaction topology pairs crossed with mask-gating
modes, each trained from scratch with shared seeds and scored on held-out
pairs by the generation-time consistency metric.

Topology cells pair the update direction into the video branch with the one
into the audio branch: "global" attends across the whole sequence with no
temporal structure, "framewise" reads only the aligned frame, "windowed"
reads the aligned neighborhood (the interpolating read for audio). The
"disabled" cell removes the exchange entirely and is the floor any useful
interaction has to clear.
"""

from __future__ import annotations

import copy
import os
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .checkpoint import load_model_state, read_checkpoint
from .config import RunConfig
from .data import consistency_score, generate_sample
from .errors import ConfigError, UndefinedScore
from .maskgate import mask_auc
from .model import JointModel
from .sampling import euler_sample
from .tasks import assemble, training_input
from .train import run_training

TOPOLOGY_PAIRS: Tuple[Tuple[str, str], ...] = (
    ("global", "global"),
    ("framewise", "framewise"),
    ("framewise", "windowed"),
    ("windowed", "framewise"),
    ("windowed", "windowed"),
)
GATE_MODES = ("off", "unsupervised", "fixed", "decay")

ABLATION_COLUMNS = ("cell", "a2v", "v2a", "gating", "seed", "consistency",
                    "mask_auc", "steps", "seconds")

_EVAL_TAG = 0xE7A1


@dataclass(frozen=True)
class AblationCell:
    name: str
    a2v: Optional[str]  # None: exchange disabled outright
    v2a: Optional[str]
    gating: str

    @property
    def disabled(self) -> bool:
        return self.a2v is None


def default_cells() -> Tuple[AblationCell, ...]:
    cells = [
        AblationCell(f"{a2v}-{v2a}/{gating}", a2v, v2a, gating)
        for a2v, v2a in TOPOLOGY_PAIRS
        for gating in GATE_MODES
    ]
    cells.append(AblationCell("disabled", None, None, "off"))
    return tuple(cells)


def select_cells(names: Sequence[str]) -> Tuple[AblationCell, ...]:
    table = {c.name: c for c in default_cells()}
    out = []
    for name in names:
        if name not in table:
            raise ConfigError(f"unknown ablation cell {name!r}; known: {sorted(table)}")
        out.append(table[name])
    return tuple(out)


def derive_config(base: RunConfig, cell: AblationCell, seed: int) -> RunConfig:
    cfg = copy.deepcopy(base)
    cfg.run.seed = seed
    if cell.disabled:
        cfg.interaction.layers = "none"
        cfg.interaction.mask_gating = False
        cfg.schedule.mask_weight = 0.0
        cfg.schedule.mask_mode = "zero"
        return cfg
    cfg.interaction.a2v = cell.a2v
    cfg.interaction.v2a = cell.v2a
    if cell.gating == "off":
        cfg.interaction.mask_gating = False
        cfg.schedule.mask_weight = 0.0
        cfg.schedule.mask_mode = "zero"
    elif cell.gating == "unsupervised":
        cfg.interaction.mask_gating = True
        cfg.schedule.mask_weight = 0.0
        cfg.schedule.mask_mode = "zero"
    elif cell.gating == "fixed":
        cfg.interaction.mask_gating = True
        cfg.schedule.mask_mode = "fixed"
    elif cell.gating == "decay":
        cfg.interaction.mask_gating = True
        cfg.schedule.mask_mode = "decay"
    else:
        raise ConfigError(f"unknown gating mode {cell.gating!r}")
    return cfg


def _eval_batch(cfg: RunConfig, n: int, dtype: torch.dtype):
    """Held-out eval pairs; a function of the run seed only, so every cell
    trained at one seed is scored on the same inputs."""
    rng = np.random.default_rng([cfg.run.seed, _EVAL_TAG])
    seeds = rng.integers(0, 2**62, size=n)
    data_cfg = cfg.data_config()
    samples = [generate_sample(data_cfg, int(s)) for s in seeds]
    return assemble("JointGen", samples, data_cfg, cfg.model.dim, dtype)


def evaluate_consistency(model: JointModel, cfg: RunConfig, n: int = 16) -> float:
    cb = _eval_batch(cfg, n, model.dtype)
    rng = np.random.default_rng([cfg.run.seed, _EVAL_TAG, 1])
    video, audio = euler_sample(
        model, cb, steps=cfg.sampler.steps, scales=cfg.guidance(), rng=rng
    )
    scores = []
    for b in range(video.shape[0]):
        try:
            scores.append(consistency_score(video[b], audio[b], cfg.data.audio_tokens))
        except UndefinedScore:
            continue
    return float(np.mean(scores)) if scores else float("nan")


def evaluate_mask_auc(model: JointModel, cfg: RunConfig, n: int = 16) -> float:
    """Rank the predicted gate over salient vs background tokens at t=0.5."""
    if not len(model.mask_heads):
        return float("nan")
    cb = _eval_batch(cfg, n, model.dtype)
    rng = np.random.default_rng([cfg.run.seed, _EVAL_TAG, 2])
    t = torch.full((cb.video.shape[0],), 0.5, dtype=model.dtype)
    nv = torch.as_tensor(rng.standard_normal(tuple(cb.clean_video_gen().shape)), dtype=model.dtype)
    na = torch.as_tensor(rng.standard_normal(tuple(cb.clean_audio_gen().shape)), dtype=model.dtype)
    inp, _, _ = training_input(cb, t, nv, na)
    with torch.no_grad():
        out = model(inp)
    scores = torch.stack(out.masks).mean(dim=0)
    return mask_auc(scores.flatten(), cb.gt_mask.flatten())


def run_ablation(
    base_cfg: RunConfig,
    out_dir: str,
    cells: Optional[Sequence[AblationCell]] = None,
    seeds: Sequence[int] = (0, 1, 2),
    eval_samples: int = 16,
    log=None,
) -> List[dict]:
    """Train every (cell, seed) and write one CSV row each to ablation.csv."""
    cells = tuple(cells) if cells is not None else default_cells()
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "ablation.csv")
    rows: List[dict] = []
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(ABLATION_COLUMNS) + "\n")
        for cell in cells:
            for seed in seeds:
                t0 = time.monotonic()
                cfg = derive_config(base_cfg, cell, seed)
                run_dir = os.path.join(out_dir, cell.name.replace("/", "_"), f"seed{seed}")
                cfg.run.out_dir = run_dir
                result = run_training(cfg, out_dir=run_dir)
                # score the model that actually landed on disk
                model = cfg.build_model(torch.Generator().manual_seed(cfg.run.seed))
                load_model_state(model, read_checkpoint(result.last_checkpoint))
                score = evaluate_consistency(model, cfg, n=eval_samples)
                auc = evaluate_mask_auc(model, cfg, n=eval_samples)
                row = {
                    "cell": cell.name,
                    "a2v": cell.a2v or "none",
                    "v2a": cell.v2a or "none",
                    "gating": cell.gating,
                    "seed": seed,
                    "consistency": score,
                    "mask_auc": auc,
                    "steps": result.steps,
                    "seconds": time.monotonic() - t0,
                }
                rows.append(row)
                fh.write(",".join(
                    str(row[c]) if c in ("cell", "a2v", "v2a", "gating", "seed", "steps")
                    else f"{row[c]:.10g}"
                    for c in ABLATION_COLUMNS
                ) + "\n")
                fh.flush()
                if log is not None:
                    log(f"{cell.name} seed {seed}: consistency {score:.3f} "
                        f"auc {auc:.3f} ({row['seconds']:.0f}s)")
    return rows


def read_ablation_csv(path: str) -> List[dict]:
    import csv as _csv

    with open(path, "r", encoding="utf-8") as fh:
        reader = _csv.DictReader(fh)
        rows = []
        for r in reader:
            r["seed"] = int(r["seed"])
            r["steps"] = int(r["steps"])
            for key in ("consistency", "mask_auc", "seconds"):
                r[key] = float(r[key])
            rows.append(r)
    return rows
