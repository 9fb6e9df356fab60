"""Guided Euler sampling of the joint flow.

Guidance is per modality: one conditional forward with the cross-modal
exchange active and one with it silenced (text conditioning stays on in
both), then each branch extrapolates from the silenced estimate toward the
conditional one with its own scale. Scale 0 reproduces the silenced field,
scale 1 the conditional one; the combination is affine in the scale.

Integration runs the straight-path ODE backwards from t=1 to t=0 with
uniform explicit Euler steps. Only generation segments are integrated;
reference and conditioning content is re-imposed from the clean assembly at
every step, so those positions cannot drift even by rounding.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .model import ModelInput, ModelOutput
from .tasks import CleanBatch, sampling_input


@dataclass(frozen=True)
class GuidanceScales:
    video: float = 2.0
    audio: float = 2.0


def combine_guidance(uncond: torch.Tensor, cond: torch.Tensor, scale: float) -> torch.Tensor:
    """uncond + scale * (cond - uncond)."""
    if uncond.shape != cond.shape:
        raise ShapeError(
            f"guidance operands disagree: {tuple(uncond.shape)} vs {tuple(cond.shape)}"
        )
    return uncond + scale * (cond - uncond)


def nullified_forward(model, inp: ModelInput) -> ModelOutput:
    """Forward pass with the cross-modal exchange silenced. The result for
    one branch is invariant to anything about the other modality's latents."""
    return model(inp, interaction=False)


def euler_sample(
    model,
    cb: CleanBatch,
    steps: int = 50,
    scales: GuidanceScales = GuidanceScales(),
    rng: Optional[np.random.Generator] = None,
    init_video: Optional[torch.Tensor] = None,
    init_audio: Optional[torch.Tensor] = None,
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Sample the generation segments of a task batch.

    Initial latents come from rng (or are passed explicitly; at least one of
    the two must cover each generating branch). Returns the full timelines
    [B, T, Nv, C] and [B, T, k, C]: conditioning prefixes are byte-identical
    to the assembly's clean content, generation segments hold the integrated
    result.
    """
    if steps < 1:
        raise ConfigError("need at least one integration step")
    lay = cb.layout
    dtype = cb.video.dtype
    B = cb.batch

    def init_noise(explicit, frames_gen, per_frame, channels):
        shape = (B, frames_gen * per_frame, channels)
        if explicit is not None:
            if tuple(explicit.shape) != shape:
                raise ShapeError(f"initial latents must be {shape}")
            return explicit.clone()
        if rng is None:
            raise ConfigError("euler_sample needs an rng when initial latents are not given")
        return torch.as_tensor(rng.standard_normal(shape), dtype=dtype)

    gen_v = gen_a = None
    if cb.task.video_gen.present:
        gen_v = init_noise(init_video, cb.video_gen_frames(), lay.video_tokens, cb.video.shape[-1])
    if cb.task.audio_gen.present:
        gen_a = init_noise(init_audio, cb.audio_gen_frames(), lay.audio_tokens, cb.audio.shape[-1])

    ts = np.linspace(1.0, 0.0, steps + 1)
    with torch.no_grad():
        for i in range(steps):
            t, dt = float(ts[i]), float(ts[i] - ts[i + 1])
            inp = sampling_input(cb, gen_v, gen_a, t)
            cond = model(inp, interaction=True)
            uncond = model(inp, interaction=False)
            if gen_v is not None:
                gen_v = gen_v - dt * combine_guidance(uncond.video_field, cond.video_field, scales.video)
            if gen_a is not None:
                gen_a = gen_a - dt * combine_guidance(uncond.audio_field, cond.audio_field, scales.audio)

    video = cb.video[:, 1:].clone()
    audio = cb.audio[:, 1:].clone()
    if gen_v is not None:
        video[:, cb.video_cond_frames:] = gen_v.reshape(B, -1, lay.video_tokens, video.shape[-1])
    if gen_a is not None:
        audio[:, cb.audio_cond_frames:] = gen_a.reshape(B, -1, lay.audio_tokens, audio.shape[-1])
    return video, audio
