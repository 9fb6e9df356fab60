"""Token bookkeeping shared by the two branches.

A paired clip is T frames long. Each video frame is a row of `video_tokens`
latent tokens, each frame of audio is `audio_tokens` latent tokens, and the
two timelines are stored flat as [T*video_tokens, D] and [T*audio_tokens, D]
inside the transformer. The aligners work frame-structured, so the reshapes
here are used constantly and must be exact bijections.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ShapeError


@dataclass(frozen=True)
class FrameLayout:
    """Shapes tying the two token timelines to a common frame grid.

    audio_per_video is the resampling ratio between the grids: how many audio
    tokens advance per video frame. This model family keeps one audio frame
    per video frame, so it always equals audio_tokens; the field exists so the
    constraint is stated and checked rather than implied.
    """

    frames: int
    video_tokens: int
    audio_tokens: int
    dim: int
    audio_per_video: int = 0  # 0 means "same as audio_tokens"

    def __post_init__(self):
        if self.frames < 1 or self.video_tokens < 1 or self.audio_tokens < 1:
            raise ShapeError(f"degenerate layout {self}")
        if self.audio_per_video == 0:
            object.__setattr__(self, "audio_per_video", self.audio_tokens)
        if self.audio_per_video != self.audio_tokens:
            raise ShapeError(
                f"audio_per_video ({self.audio_per_video}) must equal "
                f"audio_tokens ({self.audio_tokens})"
            )

    @property
    def video_len(self) -> int:
        return self.frames * self.video_tokens

    @property
    def audio_len(self) -> int:
        return self.frames * self.audio_tokens


def to_frames(x: torch.Tensor, frames: int, per_frame: int) -> torch.Tensor:
    """[..., frames*per_frame, D] -> [..., frames, per_frame, D]."""
    if x.shape[-2] != frames * per_frame:
        raise ShapeError(
            f"cannot frame {tuple(x.shape)} as {frames}x{per_frame} tokens"
        )
    return x.reshape(*x.shape[:-2], frames, per_frame, x.shape[-1])


def to_flat(x: torch.Tensor) -> torch.Tensor:
    """[..., frames, per_frame, D] -> [..., frames*per_frame, D]."""
    if x.ndim < 3:
        raise ShapeError(f"expected frame-structured tensor, got {tuple(x.shape)}")
    return x.reshape(*x.shape[:-3], x.shape[-3] * x.shape[-2], x.shape[-1])


def reshape_video(x: torch.Tensor, layout: FrameLayout) -> torch.Tensor:
    return to_frames(x, layout.frames, layout.video_tokens)


def reshape_audio(x: torch.Tensor, layout: FrameLayout) -> torch.Tensor:
    return to_frames(x, layout.frames, layout.audio_tokens)
