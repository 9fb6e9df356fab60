"""Rectified-flow training targets and losses.

Straight-path corruption z_t = (1-t) x0 + t noise; the network regresses the
constant velocity of that path, noise - x0. Losses are plain mean squared
error over whatever generation tokens exist; a branch with nothing to
generate contributes an exact zero so task mixtures compose additively.
"""

from __future__ import annotations

import torch

from .errors import ShapeError


def _bview(t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    if t.ndim == 0:
        return t
    if t.shape[0] != like.shape[0]:
        raise ShapeError("per-sample t length does not match batch")
    return t.reshape(-1, *([1] * (like.ndim - 1)))


def noise_latents(x0: torch.Tensor, noise: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Point on the straight path at time t (t=0 clean, t=1 pure noise)."""
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != data {tuple(x0.shape)}")
    tt = _bview(t, x0)
    return (1.0 - tt) * x0 + tt * noise


def flow_target(x0: torch.Tensor, noise: torch.Tensor) -> torch.Tensor:
    """Velocity the model must predict, constant along the path."""
    if noise.shape != x0.shape:
        raise ShapeError(f"noise shape {tuple(noise.shape)} != data {tuple(x0.shape)}")
    return noise - x0


def velocity_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """MSE over generation tokens; exactly zero for an empty segment."""
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.numel() == 0:
        return torch.zeros((), dtype=pred.dtype)
    return (pred - target).square().mean()


def joint_loss(
    video_loss: torch.Tensor,
    audio_loss: torch.Tensor,
    mask_loss: torch.Tensor,
    mask_weight: float,
) -> torch.Tensor:
    """Training objective: both velocity losses plus weighted mask loss."""
    return video_loss + audio_loss + mask_weight * mask_loss
