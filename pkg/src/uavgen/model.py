"""The dual-branch joint denoiser.

Two structurally identical transformer branches process the video and audio
token sequences. Each sequence is [reference slot | timeline]: one reference
frame of tokens (a learned null vector when the task provides none) followed
by the T-frame timeline, which splits into a clean conditioning prefix and
the noised generation suffix. After configured blocks the branches exchange
features through the cross-modal aligners; only generation tokens receive
updates, conditioning and reference tokens pass through bit-identical. The
predicted region mask gates the video-side injection and modulates the video
features offered to the audio side.

Interaction can be disabled per call, which yields the exchange-silenced
forward pass used both as the guidance baseline and for the audio-only
training stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import torch
from torch import nn

from .blocks import Block, OutputHead, TimestepEmbedder
from .errors import ConfigError, ShapeError
from .interaction import (
    AlignerPair,
    InteractionConfig,
    a2v_update,
    global_a2v_update,
    global_v2a_update,
    inject_residual,
    v2a_update,
)
from .layout import FrameLayout
from .maskgate import MaskHead, modulate_source
from .numerics import LinearMap

ROLE_REF, ROLE_COND, ROLE_GEN = 0, 1, 2


@dataclass(frozen=True)
class BranchConfig:
    """One branch's shape. Branches must agree on depth and heads; widths may
    differ, the aligners project across."""

    modality: str
    depth: int = 4
    dim: int = 64
    heads: int = 4
    ff_mult: float = 4.0
    latent_channels: int = 6
    text_vocab: int = 8
    text_len: int = 1
    freq_dim: int = 64

    def __post_init__(self):
        if self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.depth < 1 or self.latent_channels < 1:
            raise ConfigError("degenerate branch config")


@dataclass
class ModelInput:
    """One batched forward pass worth of conditioning and latents.

    Token tensors cover [reference slot | timeline]. time carries the
    per-token noise level: zero on reference and conditioning positions, the
    sampled t on generation positions. cond_frames count the clean timeline
    prefix; has_gen says whether anything after it exists to denoise.
    """

    video_tokens: torch.Tensor
    audio_tokens: torch.Tensor
    video_time: torch.Tensor
    audio_time: torch.Tensor
    video_roles: torch.Tensor
    audio_roles: torch.Tensor
    video_text: torch.Tensor
    audio_text: torch.Tensor
    video_ref_present: bool
    audio_ref_present: bool
    video_cond_frames: int
    audio_cond_frames: int
    video_has_gen: bool
    audio_has_gen: bool


@dataclass
class ModelOutput:
    """Predicted velocity fields over the generation tokens (empty second
    axis when a branch has nothing to generate) plus per-layer region masks
    from the interaction exchange."""

    video_field: torch.Tensor
    audio_field: torch.Tensor
    masks: List[torch.Tensor] = field(default_factory=list)


class Branch(nn.Module):
    """Embedding, block stack and output head for one modality."""

    def __init__(self, cfg: BranchConfig, total_tokens: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.cfg = cfg
        D = cfg.dim

        def table(*shape):
            return nn.Parameter(torch.randn(*shape, generator=gen, dtype=dtype) * 0.02)

        self.in_proj = LinearMap(cfg.latent_channels, D, gen=gen, dtype=dtype)
        self.pos = table(total_tokens, D)
        self.roles = table(3, D)
        self.null_ref = table(D)
        self.text_table = table(cfg.text_vocab, D)
        self.text_pos = table(max(cfg.text_len, 1), D)
        self.text_null = table(1, D)
        self.time_embed = TimestepEmbedder(cfg.freq_dim, D, gen=gen, dtype=dtype)
        self.time_proj = LinearMap(D, 6 * D, gen=gen, dtype=dtype)
        self.blocks = nn.ModuleList(
            Block(D, cfg.heads, cfg.ff_mult, gen=gen, dtype=dtype) for _ in range(cfg.depth)
        )
        self.head = OutputHead(D, cfg.latent_channels, gen=gen, dtype=dtype)

    def embed_tokens(self, latents, time, roles, ref_present: bool, ref_tokens: int):
        B, L, _ = latents.shape
        if L > self.pos.shape[0]:
            raise ShapeError(f"sequence {L} longer than positional table {self.pos.shape[0]}")
        x = self.in_proj(latents)
        if not ref_present:
            null = self.null_ref.expand(B, ref_tokens, x.shape[-1])
            x = torch.cat([null, x[:, ref_tokens:]], dim=1)
        x = x + self.pos[:L] + self.roles[roles]
        e = self.time_embed(time)
        e6 = self.time_proj(torch.nn.functional.silu(e)).unflatten(-1, (6, x.shape[-1]))
        return x, e, e6

    def embed_text(self, ids: torch.Tensor, batch: int) -> torch.Tensor:
        if ids.numel() == 0:
            return self.text_null.expand(batch, 1, self.cfg.dim)
        return self.text_table[ids] + self.text_pos[: ids.shape[1]]


class JointModel(nn.Module):
    r"""Both branches plus the cross-modal exchange between them.

    Args:
        layout: frame/token geometry the model is built for (positional
            tables are sized to reference slot + timeline).
        video_cfg/audio_cfg: branch shapes; must share depth and heads.
        interaction: exchange wiring (topologies, window, layers, gating).
        gen: init generator; every random parameter draws from it.
    """

    def __init__(
        self,
        layout: FrameLayout,
        video_cfg: BranchConfig,
        audio_cfg: BranchConfig,
        interaction: InteractionConfig,
        gen: torch.Generator,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if video_cfg.depth != audio_cfg.depth:
            raise ConfigError("branches must share depth")
        self.layout = layout
        self.interaction = interaction
        self.video = Branch(video_cfg, (1 + layout.frames) * layout.video_tokens, gen, dtype)
        self.audio = Branch(audio_cfg, (1 + layout.frames) * layout.audio_tokens, gen, dtype)
        self.layer_slots = interaction.layer_indices(video_cfg.depth)
        self.aligners = nn.ModuleList(
            AlignerPair(video_cfg.dim, audio_cfg.dim, interaction.heads, gen=gen, dtype=dtype)
            for _ in self.layer_slots
        )
        self.mask_heads = nn.ModuleList(
            MaskHead(video_cfg.dim, gen=gen, dtype=dtype) for _ in self.layer_slots
        ) if interaction.mask_gating else nn.ModuleList()

    @property
    def dtype(self) -> torch.dtype:
        return self.video.pos.dtype

    def forward(
        self,
        inp: ModelInput,
        interaction: bool = True,
        mask_override: Optional[torch.Tensor] = None,
        capture: Optional[list] = None,
    ) -> ModelOutput:
        lay = self.layout
        B = inp.video_tokens.shape[0]
        self._check_input(inp)
        xv, ev, ev6 = self.video.embed_tokens(
            inp.video_tokens, inp.video_time, inp.video_roles, inp.video_ref_present, lay.video_tokens
        )
        xa, ea, ea6 = self.audio.embed_tokens(
            inp.audio_tokens, inp.audio_time, inp.audio_roles, inp.audio_ref_present, lay.audio_tokens
        )
        text_v = self.video.embed_text(inp.video_text, B)
        text_a = self.audio.embed_text(inp.audio_text, B)

        masks: List[torch.Tensor] = []
        for depth_idx in range(self.video.cfg.depth):
            xv = self.video.blocks[depth_idx](xv, text_v, ev6)
            xa = self.audio.blocks[depth_idx](xa, text_a, ea6)
            if interaction and depth_idx in self.layer_slots:
                slot = self.layer_slots.index(depth_idx)
                xv, xa, mask = self._exchange(slot, xv, xa, inp, mask_override, capture, depth_idx)
                if mask is not None:
                    masks.append(mask)

        video_field = self._head_over_gen(
            self.video, xv, ev, lay.video_tokens, inp.video_cond_frames, inp.video_has_gen, B
        )
        audio_field = self._head_over_gen(
            self.audio, xa, ea, lay.audio_tokens, inp.audio_cond_frames, inp.audio_has_gen, B
        )
        return ModelOutput(video_field=video_field, audio_field=audio_field, masks=masks)

    def _head_over_gen(self, branch, x, e, per_frame, cond_frames, has_gen, batch):
        if not has_gen:
            return torch.zeros(batch, 0, branch.cfg.latent_channels, dtype=x.dtype)
        start = (1 + cond_frames) * per_frame
        return branch.head(x[:, start:], e[:, start:])

    def _exchange(self, slot, xv, xa, inp, mask_override, capture, depth_idx):
        lay = self.layout
        B = xv.shape[0]
        T, Nv, k = lay.frames, lay.video_tokens, lay.audio_tokens
        xv_in, xa_in = xv, xa
        vid = xv[:, Nv:].reshape(B, T, Nv, -1)
        aud = xa[:, k:].reshape(B, T, k, -1)
        pair = self.aligners[slot]

        mask = None
        if mask_override is not None:
            mask = mask_override
        elif self.interaction.mask_gating:
            mask = self.mask_heads[slot](vid)

        cut_v = inp.video_cond_frames
        cut_a_tok = inp.audio_cond_frames * k

        upd_v = None
        if inp.video_has_gen:
            if self.interaction.a2v == "global":
                q = vid[:, cut_v:].reshape(B, -1, vid.shape[-1])
                upd_v = global_a2v_update(q, aud.reshape(B, T * k, -1), pair)
                upd_v = upd_v.reshape(B, T - cut_v, Nv, -1)
            else:
                w = self.interaction.window if self.interaction.a2v == "windowed" else 0
                upd_v = a2v_update(vid, aud, pair, window=w, frame_ids=torch.arange(cut_v, T))

        upd_a = None
        if inp.audio_has_gen:
            src = modulate_source(vid, mask) if mask is not None else vid
            if self.interaction.v2a == "global":
                q = aud.reshape(B, T * k, -1)[:, cut_a_tok:]
                upd_a = global_v2a_update(q, src.reshape(B, T * Nv, -1), pair)
            else:
                upd_a = v2a_update(
                    aud, src, pair,
                    framewise=self.interaction.v2a == "framewise",
                    token_ids=torch.arange(cut_a_tok, T * k),
                )

        if upd_v is not None:
            gate = mask[:, cut_v:] if mask is not None else None
            new_gen = inject_residual(vid[:, cut_v:], upd_v, gate=gate)
            xv = torch.cat([xv[:, : (1 + cut_v) * Nv], new_gen.reshape(B, -1, xv.shape[-1])], dim=1)
        if upd_a is not None:
            flat = xa[:, k:]
            new_gen = inject_residual(flat[:, cut_a_tok:], upd_a)
            xa = torch.cat([xa[:, : k + cut_a_tok], new_gen], dim=1)

        if capture is not None:
            capture.append({
                "layer": depth_idx,
                "mask": None if mask is None else mask.detach().clone(),
                "video_before": xv_in.detach().clone(),
                "audio_before": xa_in.detach().clone(),
                "video": xv.detach().clone(),
                "audio": xa.detach().clone(),
            })
        return xv, xa, mask

    def interaction_parameters(self):
        """Named parameters of the aligners and mask heads only."""
        for name, p in self.named_parameters():
            if name.startswith(("aligners.", "mask_heads.")):
                yield name, p

    def _check_input(self, inp: ModelInput):
        lay = self.layout
        B, Lv, Cv = inp.video_tokens.shape
        _, La, Ca = inp.audio_tokens.shape
        if Lv != (1 + lay.frames) * lay.video_tokens or La != (1 + lay.frames) * lay.audio_tokens:
            raise ShapeError(
                f"token lengths ({Lv}, {La}) do not match layout {lay}"
            )
        if Cv != self.video.cfg.latent_channels or Ca != self.audio.cfg.latent_channels:
            raise ShapeError("latent channel mismatch")
        if not 0 <= inp.video_cond_frames <= lay.frames or not 0 <= inp.audio_cond_frames <= lay.frames:
            raise ShapeError("conditioning prefix outside timeline")
        if inp.video_has_gen and inp.video_cond_frames >= lay.frames:
            raise ShapeError("video generation segment is empty but flagged present")
        if inp.audio_has_gen and inp.audio_cond_frames >= lay.frames:
            raise ShapeError("audio generation segment is empty but flagged present")
        if not (inp.video_has_gen or inp.audio_has_gen):
            raise ShapeError("nothing to denoise")


def randomize_silent_projections(model: JointModel, gen: torch.Generator, scale: float = 0.05):
    """Fill the zero-initialized aligner output projections with small random
    values. At construction the exchange is silent; this switches it on, for
    connectivity tests and as the negative control for the neutrality check.
    """
    with torch.no_grad():
        for pair in model.aligners:
            for lin in (pair.a2v_out, pair.v2a_out):
                lin.weight.normal_(0.0, scale, generator=gen)
                if lin.bias is not None:
                    lin.bias.normal_(0.0, scale, generator=gen)
