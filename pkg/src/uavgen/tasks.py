"""The five sequence-assembly recipes and their participation rules.

A task decides, per segment, four things: whether the segment is present,
whether it is noised during training/sampling, whether its features feed the
other branch as an interaction source, and whether it receives interaction
updates as a sink. The joint rules across all tasks:

* reference slots never interact in either direction;
* conditioning prefixes are sources but never sinks (the other branch may
  read them, their own features stay untouched);
* generation segments are noised and interact both ways.

Assembly produces a clean batched structure; the flow utilities then noise
the generation segments for a training step, or replace them with pure noise
to start sampling. Either way the reference and conditioning content is
placed bit-identically and stays at noise level zero.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch

from .data import DataConfig, SyntheticSample, TASK_KINDS
from .errors import ConfigError, ShapeError
from .flow import flow_target, noise_latents
from .layout import FrameLayout
from .model import ModelInput, ROLE_COND, ROLE_GEN, ROLE_REF


@dataclass(frozen=True)
class SegmentFlags:
    present: bool
    noised: bool = False
    source: bool = False
    sink: bool = False


ABSENT = SegmentFlags(present=False)
REF = SegmentFlags(present=True)                                   # clean, silent
COND = SegmentFlags(present=True, source=True)                     # clean, read-only
GEN = SegmentFlags(present=True, noised=True, source=True, sink=True)


@dataclass(frozen=True)
class TaskAssembly:
    """Participation flags for one task, per segment."""

    kind: str
    video_ref: SegmentFlags
    video_cond: SegmentFlags
    video_gen: SegmentFlags
    audio_ref: SegmentFlags
    audio_cond: SegmentFlags
    audio_gen: SegmentFlags

    def __post_init__(self):
        if not (self.video_gen.noised and self.video_gen.present) and not (
            self.audio_gen.noised and self.audio_gen.present
        ):
            raise ConfigError(f"{self.kind}: no noised generation segment")
        for name in ("video_ref", "audio_ref"):
            seg = getattr(self, name)
            if seg.source or seg.sink:
                raise ConfigError(f"{self.kind}: reference segments never interact")
        for name in ("video_cond", "audio_cond"):
            seg = getattr(self, name)
            if seg.sink:
                raise ConfigError(f"{self.kind}: conditioning segments are never sinks")


ASSEMBLIES = {
    "JointGen": TaskAssembly(
        "JointGen",
        video_ref=REF, video_cond=ABSENT, video_gen=GEN,
        audio_ref=ABSENT, audio_cond=ABSENT, audio_gen=GEN,
    ),
    "JointGenRefAudio": TaskAssembly(
        "JointGenRefAudio",
        video_ref=REF, video_cond=ABSENT, video_gen=GEN,
        audio_ref=REF, audio_cond=ABSENT, audio_gen=GEN,
    ),
    "JointContinuation": TaskAssembly(
        "JointContinuation",
        video_ref=ABSENT, video_cond=COND, video_gen=GEN,
        audio_ref=ABSENT, audio_cond=COND, audio_gen=GEN,
    ),
    "V2ADubbing": TaskAssembly(
        "V2ADubbing",
        video_ref=REF, video_cond=COND, video_gen=ABSENT,
        audio_ref=ABSENT, audio_cond=ABSENT, audio_gen=GEN,
    ),
    "A2VSynthesis": TaskAssembly(
        "A2VSynthesis",
        video_ref=REF, video_cond=ABSENT, video_gen=GEN,
        audio_ref=ABSENT, audio_cond=COND, audio_gen=ABSENT,
    ),
}
assert tuple(ASSEMBLIES) == TASK_KINDS


def assembly_for(kind: str) -> TaskAssembly:
    try:
        return ASSEMBLIES[kind]
    except KeyError:
        raise ConfigError(f"unknown task {kind!r}, expected one of {TASK_KINDS}")


@dataclass
class CleanBatch:
    """Clean latents plus segment geometry for a batch of one task.

    video/audio hold [B, 1+T, per_frame, C] with the reference slot first
    (zeros where absent; the model substitutes its null embedding there).
    cond_frames is the clean timeline prefix length in frames, identical
    across the batch.
    """

    task: TaskAssembly
    layout: FrameLayout
    video: torch.Tensor
    audio: torch.Tensor
    video_text: torch.Tensor
    audio_text: torch.Tensor
    gt_mask: torch.Tensor
    video_cond_frames: int
    audio_cond_frames: int

    @property
    def batch(self) -> int:
        return self.video.shape[0]

    def video_gen_frames(self) -> int:
        return self.layout.frames - self.video_cond_frames if self.task.video_gen.present else 0

    def audio_gen_frames(self) -> int:
        return self.layout.frames - self.audio_cond_frames if self.task.audio_gen.present else 0

    def clean_video_gen(self) -> torch.Tensor:
        """[B, Gv*Nv, C] clean target content of the video generation segment."""
        if not self.task.video_gen.present:
            return self.video[:, :0, 0]
        return self.video[:, 1 + self.video_cond_frames:].flatten(1, 2)

    def clean_audio_gen(self) -> torch.Tensor:
        if not self.task.audio_gen.present:
            return self.audio[:, :0, 0]
        return self.audio[:, 1 + self.audio_cond_frames:].flatten(1, 2)


def cond_prefix_frames(cfg: DataConfig) -> int:
    c = int(round(cfg.frames * cfg.cond_fraction))
    return min(max(c, 1), cfg.frames - 1)


def assemble(
    kind: str,
    samples: Sequence[SyntheticSample],
    cfg: DataConfig,
    dim: int,
    dtype: torch.dtype = torch.float32,
) -> CleanBatch:
    """Stack samples into the clean batched layout for one task."""
    task = assembly_for(kind)
    if not samples:
        raise ShapeError("empty batch")
    layout = cfg.layout(dim)
    T = layout.frames

    if kind == "JointContinuation":
        cond = cond_prefix_frames(cfg)
        if cond < 1:
            raise ConfigError("continuation without a conditioning prefix")
        video_cond, audio_cond = cond, cond
    elif kind == "V2ADubbing":
        video_cond, audio_cond = T, 0
    elif kind == "A2VSynthesis":
        video_cond, audio_cond = 0, T
    else:
        video_cond, audio_cond = 0, 0

    vids, auds, vtxt, atxt, masks = [], [], [], [], []
    for s in samples:
        if s.video.shape != (T, cfg.video_tokens, cfg.channels):
            raise ShapeError(f"sample video shape {s.video.shape} does not fit config")
        v_ref = s.video[0] if task.video_ref.present else np.zeros_like(s.video[0])
        a_ref = s.audio[0] if task.audio_ref.present else np.zeros_like(s.audio[0])
        vids.append(np.concatenate([v_ref[None], s.video], axis=0))
        auds.append(np.concatenate([a_ref[None], s.audio], axis=0))
        vtxt.append([s.style])
        atxt.append(s.symbols)
        masks.append(s.gt_mask)

    return CleanBatch(
        task=task,
        layout=layout,
        video=torch.as_tensor(np.stack(vids), dtype=dtype),
        audio=torch.as_tensor(np.stack(auds), dtype=dtype),
        video_text=torch.as_tensor(np.array(vtxt), dtype=torch.long),
        audio_text=torch.as_tensor(np.stack(atxt), dtype=torch.long),
        gt_mask=torch.as_tensor(np.stack(masks), dtype=dtype),
        video_cond_frames=video_cond,
        audio_cond_frames=audio_cond,
    )


def _roles(frames: int, per_frame: int, cond_frames: int) -> torch.Tensor:
    roles = [ROLE_REF] * per_frame
    roles += [ROLE_COND] * (cond_frames * per_frame)
    roles += [ROLE_GEN] * ((frames - cond_frames) * per_frame)
    return torch.tensor(roles, dtype=torch.long)


def _time_tokens(frames, per_frame, cond_frames, has_gen, t, batch, dtype) -> torch.Tensor:
    total = (1 + frames) * per_frame
    time = torch.zeros(batch, total, dtype=dtype)
    if has_gen:
        tt = t if isinstance(t, torch.Tensor) else torch.full((batch,), float(t), dtype=dtype)
        time[:, (1 + cond_frames) * per_frame:] = tt.reshape(-1, 1).to(dtype)
    return time


def _model_input(cb: CleanBatch, video_flat, audio_flat, t) -> ModelInput:
    lay = cb.layout
    task = cb.task
    has_v = task.video_gen.present
    has_a = task.audio_gen.present
    return ModelInput(
        video_tokens=video_flat,
        audio_tokens=audio_flat,
        video_time=_time_tokens(lay.frames, lay.video_tokens, cb.video_cond_frames, has_v, t, cb.batch, video_flat.dtype),
        audio_time=_time_tokens(lay.frames, lay.audio_tokens, cb.audio_cond_frames, has_a, t, cb.batch, audio_flat.dtype),
        video_roles=_roles(lay.frames, lay.video_tokens, cb.video_cond_frames if has_v else lay.frames),
        audio_roles=_roles(lay.frames, lay.audio_tokens, cb.audio_cond_frames if has_a else lay.frames),
        video_text=cb.video_text,
        audio_text=cb.audio_text,
        video_ref_present=task.video_ref.present,
        audio_ref_present=task.audio_ref.present,
        video_cond_frames=cb.video_cond_frames,
        audio_cond_frames=cb.audio_cond_frames,
        video_has_gen=has_v,
        audio_has_gen=has_a,
    )


def training_input(
    cb: CleanBatch,
    t: torch.Tensor,
    noise_video: Optional[torch.Tensor],
    noise_audio: Optional[torch.Tensor],
) -> Tuple[ModelInput, torch.Tensor, torch.Tensor]:
    """Noise the generation segments at per-sample t and return the model
    input together with both velocity targets ([B, 0, C] when absent)."""
    video_flat = cb.video.flatten(1, 2)
    audio_flat = cb.audio.flatten(1, 2)
    target_v = video_flat[:, :0]
    target_a = audio_flat[:, :0]

    if cb.task.video_gen.present:
        x0 = cb.clean_video_gen()
        if noise_video is None or noise_video.shape != x0.shape:
            raise ShapeError("video noise missing or mis-shaped")
        start = (1 + cb.video_cond_frames) * cb.layout.video_tokens
        video_flat = torch.cat([video_flat[:, :start], noise_latents(x0, noise_video, t)], dim=1)
        target_v = flow_target(x0, noise_video)
    if cb.task.audio_gen.present:
        x0 = cb.clean_audio_gen()
        if noise_audio is None or noise_audio.shape != x0.shape:
            raise ShapeError("audio noise missing or mis-shaped")
        start = (1 + cb.audio_cond_frames) * cb.layout.audio_tokens
        audio_flat = torch.cat([audio_flat[:, :start], noise_latents(x0, noise_audio, t)], dim=1)
        target_a = flow_target(x0, noise_audio)

    return _model_input(cb, video_flat, audio_flat, t), target_v, target_a


def sampling_input(
    cb: CleanBatch,
    gen_video: Optional[torch.Tensor],
    gen_audio: Optional[torch.Tensor],
    t: float,
) -> ModelInput:
    """Place current generation-segment latents into the clean scaffold at a
    shared noise level t."""
    video_flat = cb.video.flatten(1, 2)
    audio_flat = cb.audio.flatten(1, 2)
    if cb.task.video_gen.present:
        start = (1 + cb.video_cond_frames) * cb.layout.video_tokens
        if gen_video is None or gen_video.shape != video_flat[:, start:].shape:
            raise ShapeError("video generation latents missing or mis-shaped")
        video_flat = torch.cat([video_flat[:, :start], gen_video], dim=1)
    if cb.task.audio_gen.present:
        start = (1 + cb.audio_cond_frames) * cb.layout.audio_tokens
        if gen_audio is None or gen_audio.shape != audio_flat[:, start:].shape:
            raise ShapeError("audio generation latents missing or mis-shaped")
        audio_flat = torch.cat([audio_flat[:, :start], gen_audio], dim=1)
    return _model_input(cb, video_flat, audio_flat, t)
