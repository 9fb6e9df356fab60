"""Cross-modal aligners between the video and audio branches.

Three context topologies per direction:

* "windowed": the asymmetric design this package is built around. Each video
  frame cross-attends a clamped window of neighbouring audio frames; each
  audio token cross-attends a single video frame context interpolated between
  its two bracketing frames (the final frame's tokens read that frame alone).
* "framewise": strict same-frame pairing. Audio-to-video with a zero-width
  window, video-to-audio with the interpolation weight pinned to zero, i.e.
  nearest-frame-on-the-left. Implemented by forcing those parameters through
  the windowed code path so the degenerate equivalence is exact.
* "global": every query token attends all timeline tokens of the other
  modality with no temporal structure at all.

The aligners carry no positional encodings on purpose: temporal structure
enters only through which tokens are offered as context, which is what makes
the locality guarantees testable down to the bit.

Each directional update returns out_proj(query_features + attention), where
out_proj starts at exactly zero, so a freshly constructed aligner is silent
and the joint model equals two independent branches.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import torch
from torch import nn

from .errors import ConfigError, ShapeError
from .layout import FrameLayout
from .numerics import LinearMap, multi_head_cross_attention

TOPOLOGIES = ("global", "framewise", "windowed")


@dataclass(frozen=True)
class InteractionConfig:
    """Wiring of the cross-modal exchange.

    a2v/v2a name the topology used for updates flowing into the video and
    audio branch respectively, window the half-width (in frames) of the
    audio context read by each video frame, layers the block indices after
    which an exchange happens ("all", "none", or explicit indices), and
    mask_gating whether the predicted salient-region mask gates the
    exchange.
    """

    a2v: str = "windowed"
    v2a: str = "windowed"
    window: int = 1
    heads: int = 4
    layers: Tuple[int, ...] | str = "all"
    mask_gating: bool = True

    def __post_init__(self):
        if self.a2v not in TOPOLOGIES or self.v2a not in TOPOLOGIES:
            raise ConfigError(f"unknown topology in {self.a2v!r}/{self.v2a!r}")
        if self.window < 0:
            raise ConfigError("window must be >= 0")
        if self.heads < 1:
            raise ConfigError("heads must be >= 1")

    def layer_indices(self, depth: int) -> Tuple[int, ...]:
        if self.layers == "all":
            return tuple(range(depth))
        if self.layers == "none":
            return ()
        idx = tuple(sorted(set(self.layers)))
        if idx and (idx[0] < 0 or idx[-1] >= depth):
            raise ConfigError(f"interaction layers {idx} out of range for depth {depth}")
        return idx


class AlignerPair(nn.Module):
    r"""Projections for one interaction layer, both directions.

    Args:
        video_dim: width of video branch features.
        audio_dim: width of audio branch features.
        heads: attention heads; must divide both widths.
        gen: generator for the query/key/value initializations.

    Key and value projections map the source modality into the sink
    modality's width. Both output projections (and their biases) start at
    exactly zero.
    """

    def __init__(
        self,
        video_dim: int,
        audio_dim: int,
        heads: int,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if video_dim % heads or audio_dim % heads:
            raise ConfigError(f"heads={heads} must divide dims {video_dim}/{audio_dim}")
        self.heads = heads
        kw = dict(bias=False, gen=gen, dtype=dtype)
        self.a2v_query = LinearMap(video_dim, video_dim, **kw)
        self.a2v_key = LinearMap(audio_dim, video_dim, **kw)
        self.a2v_value = LinearMap(audio_dim, video_dim, **kw)
        self.a2v_out = LinearMap(video_dim, video_dim, bias=True, init_mode="zero", dtype=dtype)
        self.v2a_query = LinearMap(audio_dim, audio_dim, **kw)
        self.v2a_key = LinearMap(video_dim, audio_dim, **kw)
        self.v2a_value = LinearMap(video_dim, audio_dim, **kw)
        self.v2a_out = LinearMap(audio_dim, audio_dim, bias=True, init_mode="zero", dtype=dtype)


def build_audio_context(audio_frames: torch.Tensor, frame: int, window: int) -> torch.Tensor:
    """Audio context read by one video frame: frames [i-w, i+w], edge-clamped.

    audio_frames is [..., T, k, D]; the result is [..., (2w+1)*k, D] with the
    window flattened in temporal order. Out-of-range neighbours repeat the
    edge frame rather than shrinking the window, so the context length is
    constant across frames.
    """
    T = audio_frames.shape[-3]
    if not 0 <= frame < T:
        raise ShapeError(f"frame {frame} outside [0, {T})")
    ids = [min(max(frame + d, 0), T - 1) for d in range(-window, window + 1)]
    ctx = audio_frames.index_select(-3, torch.tensor(ids, device=audio_frames.device))
    return ctx.flatten(-3, -2)


def _window_ids(frame_ids: torch.Tensor, frames: int, window: int) -> torch.Tensor:
    offsets = torch.arange(-window, window + 1, device=frame_ids.device)
    return (frame_ids[:, None] + offsets[None, :]).clamp_(0, frames - 1)


def a2v_update(
    video_frames: torch.Tensor,
    audio_frames: torch.Tensor,
    pair: AlignerPair,
    window: int,
    frame_ids: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Audio-to-video alignment update for the selected video frames.

    video_frames [..., T, Nv, Dv], audio_frames [..., T, k, Da]. Returns the
    residual update [..., F, Nv, Dv] for frame_ids (all frames when None).
    Each frame's tokens attend only its own clamped window of audio frames;
    nothing else can influence the result, bit for bit.
    """
    T = video_frames.shape[-3]
    if audio_frames.shape[-3] != T:
        raise ShapeError("video and audio disagree on frame count")
    if frame_ids is None:
        frame_ids = torch.arange(T, device=video_frames.device)
    queries = video_frames.index_select(-3, frame_ids)
    ids = _window_ids(frame_ids, T, window)  # [F, 2w+1]
    ctx = audio_frames.index_select(-3, ids.reshape(-1))
    ctx = ctx.unflatten(-3, (frame_ids.numel(), 2 * window + 1)).flatten(-3, -2)
    attn = multi_head_cross_attention(
        queries, ctx, pair.a2v_query, pair.a2v_key, pair.a2v_value, pair.heads
    )
    return pair.a2v_out(queries + attn)


def interpolate_video_context(video_frames: torch.Tensor, token: int, layout: FrameLayout) -> torch.Tensor:
    """Video context read by one audio token.

    Token j sitting between video frames i = j // k and i+1 gets the linear
    blend (1-a)*frame_i + a*frame_{i+1} with a = (j mod k) / k. Tokens of the
    final frame read that frame directly, no blend arithmetic involved.
    """
    k = layout.audio_per_video
    T = video_frames.shape[-3]
    if not 0 <= token < T * k:
        raise ShapeError(f"audio token {token} outside [0, {T * k})")
    i = token // k
    if i == T - 1:
        return video_frames[..., T - 1, :, :]
    alpha = (token % k) / k
    return (1.0 - alpha) * video_frames[..., i, :, :] + alpha * video_frames[..., i + 1, :, :]


def _token_contexts(
    video_frames: torch.Tensor,
    token_ids: torch.Tensor,
    k: int,
    alphas: Optional[torch.Tensor],
) -> torch.Tensor:
    """Per-token interpolated video contexts, vectorized. [..., J, Nv, Dv]."""
    T = video_frames.shape[-3]
    i = torch.div(token_ids, k, rounding_mode="floor")
    if alphas is None:
        alphas = (token_ids % k).to(video_frames.dtype) / k
    left = video_frames.index_select(-3, i)
    right = video_frames.index_select(-3, (i + 1).clamp(max=T - 1))
    a = alphas.reshape(-1, 1, 1)
    ctx = (1.0 - a) * left + a * right
    # The final frame's tokens must read that frame exactly, not through the
    # blend (even (1-a)*x + a*x can round differently from x).
    last = (i == T - 1).reshape(-1, 1, 1)
    return torch.where(last, left, ctx)


def v2a_update(
    audio_frames: torch.Tensor,
    video_frames: torch.Tensor,
    pair: AlignerPair,
    framewise: bool = False,
    token_ids: Optional[torch.Tensor] = None,
    alphas: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Video-to-audio alignment update for the selected audio tokens.

    audio_frames [..., T, k, Da], video_frames [..., T, Nv, Dv]. Returns
    [..., J, Da] for token_ids (all T*k tokens when None). framewise pins the
    interpolation weight to zero so each token reads only its own left frame;
    alphas overrides the weights outright (testing hook).
    """
    T, k = audio_frames.shape[-3], audio_frames.shape[-2]
    if video_frames.shape[-3] != T:
        raise ShapeError("video and audio disagree on frame count")
    if token_ids is None:
        token_ids = torch.arange(T * k, device=audio_frames.device)
    if framewise:
        if alphas is not None:
            raise ShapeError("framewise already pins alphas; cannot override both")
        alphas = torch.zeros(token_ids.numel(), dtype=video_frames.dtype, device=video_frames.device)
    flat = audio_frames.flatten(-3, -2)
    queries = flat.index_select(-2, token_ids).unsqueeze(-2)  # [..., J, 1, Da]
    ctx = _token_contexts(video_frames, token_ids, k, alphas)
    attn = multi_head_cross_attention(
        queries, ctx, pair.v2a_query, pair.v2a_key, pair.v2a_value, pair.heads
    )
    return pair.v2a_out(queries + attn).squeeze(-2)


def global_a2v_update(
    video_tokens: torch.Tensor,
    audio_tokens: torch.Tensor,
    pair: AlignerPair,
) -> torch.Tensor:
    """Unwindowed variant: video tokens [..., Lq, Dv] attend every audio
    timeline token [..., La, Da] at once."""
    attn = multi_head_cross_attention(
        video_tokens, audio_tokens, pair.a2v_query, pair.a2v_key, pair.a2v_value, pair.heads
    )
    return pair.a2v_out(video_tokens + attn)


def global_v2a_update(
    audio_tokens: torch.Tensor,
    video_tokens: torch.Tensor,
    pair: AlignerPair,
) -> torch.Tensor:
    attn = multi_head_cross_attention(
        audio_tokens, video_tokens, pair.v2a_query, pair.v2a_key, pair.v2a_value, pair.heads
    )
    return pair.v2a_out(audio_tokens + attn)


def inject_residual(h: torch.Tensor, update: torch.Tensor, gate: Optional[torch.Tensor] = None) -> torch.Tensor:
    """h + update, optionally gated elementwise. gate may omit the feature
    axis, in which case it broadcasts across it."""
    if update.shape != h.shape:
        raise ShapeError(f"update shape {tuple(update.shape)} != {tuple(h.shape)}")
    if gate is None:
        return h + update
    if gate.ndim == h.ndim - 1:
        gate = gate.unsqueeze(-1)
    return h + gate * update
