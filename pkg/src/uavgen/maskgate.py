"""Salient-region gating of the cross-modal exchange.

Speech-coupled content lives in a small spatial region of each video frame
(mouth, jaw, the synthetic analog here is a contiguous token slot). A tiny
head after each interaction layer predicts a per-token probability of being
inside that region; the prediction then gates the audio-to-video update and
modulates the video features offered to the audio branch, so the exchange
concentrates where the coupling actually is.

During training the heads are supervised against the known region with a
weight that starts at `initial` and decays linearly to zero: early on the
supervision bootstraps the gate, later the model is free to reshape it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .numerics import AffineNormParams, LinearMap, layer_norm, sigmoid


class MaskHead(nn.Module):
    r"""Per-token region probability from branch features.

    Args:
        dim: feature width of the video branch.
        gen: generator for the projection init.

    Normalizes features, applies a learned affine, projects to one logit and
    squashes. Output lies strictly inside (0, 1): the gate never exactly
    zeroes an update and never passes one through untouched.
    """

    def __init__(self, dim: int, gen: torch.Generator, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.affine = AffineNormParams(dim, dtype=dtype)
        self.proj = LinearMap(dim, 1, bias=True, gen=gen, dtype=dtype)

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        """[..., T, Nv, D] -> [..., T, Nv]."""
        logits = self.proj(self.affine(layer_norm(h)))
        return sigmoid(logits.squeeze(-1))


def validate_mask_target(target: torch.Tensor) -> torch.Tensor:
    if not torch.all((target == 0.0) | (target == 1.0)):
        raise ShapeError("mask target must be exactly binary")
    return target


def mask_loss(predicted: Sequence[torch.Tensor], target: torch.Tensor) -> torch.Tensor:
    """Sum over layers of the mean squared gap to the region indicator.

    Zero exactly when every layer's prediction equals the target everywhere
    (and only then, the summands being squares).
    """
    validate_mask_target(target)
    if len(predicted) == 0:
        return torch.zeros((), dtype=target.dtype)
    total = torch.zeros((), dtype=predicted[0].dtype)
    for m in predicted:
        if m.shape != target.shape:
            raise ShapeError(f"mask shape {tuple(m.shape)} != target {tuple(target.shape)}")
        total = total + (m - target).square().mean()
    return total


@dataclass(frozen=True)
class MaskSchedule:
    """Supervision weight over training steps.

    mode "decay" ramps initial -> 0 linearly across total_steps (exact zero
    at and past the end), "fixed" holds initial, "zero" disables supervision
    while leaving the gates active.
    """

    initial: float = 0.1
    total_steps: int = 1
    mode: str = "decay"

    def __post_init__(self):
        if self.mode not in ("decay", "fixed", "zero"):
            raise ConfigError(f"unknown mask schedule mode {self.mode!r}")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.initial < 0:
            raise ConfigError("initial weight must be >= 0")

    def weight_at(self, step: int) -> float:
        if self.mode == "zero":
            return 0.0
        if self.mode == "fixed":
            return self.initial
        if step >= self.total_steps:
            return 0.0
        return self.initial * (1.0 - step / self.total_steps)


def modulate_source(video_frames: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Scale video features by the region probability before they are offered
    to the audio branch. mask is [..., T, Nv] against [..., T, Nv, D]."""
    if mask.shape != video_frames.shape[:-1]:
        raise ShapeError(
            f"mask {tuple(mask.shape)} does not match frames {tuple(video_frames.shape)}"
        )
    return video_frames * mask.unsqueeze(-1)


def mask_auc(scores: torch.Tensor, labels: torch.Tensor) -> float:
    """Rank AUC of mask scores against the binary region indicator.

    Ties get average rank. Returns 0.5 on degenerate labels (all one class)
    rather than raising; callers treat that as chance level.
    """
    s = scores.detach().reshape(-1).to(torch.float64)
    y = labels.detach().reshape(-1)
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        return 0.5
    order = torch.argsort(s)
    ranks = torch.empty_like(s)
    ranks[order] = torch.arange(1, s.numel() + 1, dtype=torch.float64)
    # average ranks over tied score groups
    sorted_s = s[order]
    boundaries = torch.ones(s.numel(), dtype=torch.bool)
    boundaries[1:] = sorted_s[1:] != sorted_s[:-1]
    group = torch.cumsum(boundaries.to(torch.int64), 0) - 1
    n_groups = int(group[-1]) + 1
    sums = torch.zeros(n_groups, dtype=torch.float64).scatter_add_(
        0, group, torch.arange(1, s.numel() + 1, dtype=torch.float64)
    )
    counts = torch.zeros(n_groups, dtype=torch.float64).scatter_add_(
        0, group, torch.ones(s.numel(), dtype=torch.float64)
    )
    avg = sums / counts
    ranks[order] = avg[group]
    rank_sum_pos = float(ranks[y == 1].sum())
    u = rank_sum_pos - pos * (pos + 1) / 2.0
    return u / (pos * neg)
