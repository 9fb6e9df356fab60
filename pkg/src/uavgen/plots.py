"""Static figures from training metrics and ablation tables."""

from __future__ import annotations

import csv
import math
from typing import Dict, List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import FormatError


def _read_metrics(path: str) -> Dict[str, List[float]]:
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "step" not in reader.fieldnames:
            raise FormatError(f"{path}: not a metrics CSV")
        cols: Dict[str, List[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for name in cols:
                cols[name].append(float(row[name]))
    if not cols["step"]:
        raise FormatError(f"{path}: no metric rows")
    return cols


def plot_training(metrics_path: str, out_path: str) -> None:
    """Loss curves, mask weight trace, and probe consistency in one figure."""
    cols = _read_metrics(metrics_path)
    steps = cols["step"]
    fig, axes = plt.subplots(3, 1, figsize=(8, 9), sharex=True)

    ax = axes[0]
    for key, label in (("loss_video", "video velocity"),
                       ("loss_audio", "audio velocity"),
                       ("loss_mask", "mask")):
        ax.plot(steps, cols[key], label=label, linewidth=1.0)
    ax.set_yscale("log")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right", fontsize=8)
    ax.grid(alpha=0.3)

    ax = axes[1]
    ax.plot(steps, cols["lambda_mask"], color="tab:purple", linewidth=1.2)
    ax.set_ylabel("mask loss weight")
    ax.grid(alpha=0.3)

    ax = axes[2]
    probe_steps = [s for s, c in zip(steps, cols["consistency"]) if not math.isnan(c)]
    probe_vals = [c for c in cols["consistency"] if not math.isnan(c)]
    ax.plot(probe_steps, probe_vals, marker="o", markersize=3,
            color="tab:green", linewidth=1.0)
    ax.set_ylim(-1.05, 1.05)
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.set_ylabel("probe consistency")
    ax.set_xlabel("step")
    ax.grid(alpha=0.3)

    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_ablation(csv_path: str, out_path: str) -> None:
    """Per-cell consistency: seed scatter plus mean bar, sorted by mean."""
    from .ablate import read_ablation_csv

    rows = read_ablation_csv(csv_path)
    if not rows:
        raise FormatError(f"{csv_path}: no ablation rows")
    by_cell: Dict[str, List[float]] = {}
    for r in rows:
        by_cell.setdefault(r["cell"], []).append(r["consistency"])
    names = sorted(by_cell, key=lambda n: sum(by_cell[n]) / len(by_cell[n]))
    means = [sum(by_cell[n]) / len(by_cell[n]) for n in names]

    fig, ax = plt.subplots(figsize=(8, 0.45 * len(names) + 1.5))
    ypos = range(len(names))
    ax.barh(ypos, means, color="tab:blue", alpha=0.55, zorder=2)
    for y, name in zip(ypos, names):
        vals = by_cell[name]
        ax.plot(vals, [y] * len(vals), "k.", markersize=5, zorder=3)
    ax.set_yticks(list(ypos))
    ax.set_yticklabels(names, fontsize=8)
    ax.set_xlabel("held-out consistency")
    ax.axvline(0.0, color="gray", linewidth=0.6)
    ax.grid(axis="x", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
