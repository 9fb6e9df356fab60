"""Transformer building blocks shared by the two branches.

Pre-norm blocks with shift/scale adaptive normalization driven by the noise
level: a shared projection of the timestep embedding plus a per-block learned
offset yields six vectors per token (shift and scale around each of the three
sublayers). Every sublayer's output projection starts at zero, so a block is
exactly the identity on the residual stream at construction. The noise level
is per token: conditioning tokens ride at t=0 while generation tokens carry
the sampled t.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .numerics import LinearMap, layer_norm, multi_head_cross_attention

TIME_SCALE = 1000.0  # t in [0,1] stretched so the sinusoid bank has resolution


def sinusoidal_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Classic sin/cos features of a (possibly per-token) scalar. [...,] -> [..., dim]."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=t.dtype) / half
    )
    ang = t.unsqueeze(-1) * TIME_SCALE * freqs
    emb = torch.cat([torch.cos(ang), torch.sin(ang)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[..., :1])], dim=-1)
    return emb


class TimestepEmbedder(nn.Module):
    """Sinusoidal features -> two-layer MLP -> conditioning vector."""

    def __init__(self, freq_dim: int, dim: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.freq_dim = freq_dim
        self.fc1 = LinearMap(freq_dim, dim, gen=gen, dtype=dtype)
        self.fc2 = LinearMap(dim, dim, gen=gen, dtype=dtype)

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.nn.functional.silu(self.fc1(sinusoidal_embedding(t, self.freq_dim))))


class Block(nn.Module):
    r"""One branch block: self-attention, text cross-attention, FFN.

    Args:
        dim: feature width.
        heads: attention heads for both attention sublayers.
        ff_mult: FFN expansion factor.
        gen: init generator.

    forward takes the token stream [B, L, D], the text context [B, Lt, D]
    and the modulation stack e6 [B, L, 6, D] produced by the branch from the
    per-token noise level.
    """

    def __init__(self, dim: int, heads: int, ff_mult: float, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.heads = heads
        hidden = int(dim * ff_mult)
        kw = dict(gen=gen, dtype=dtype)
        self.self_query = LinearMap(dim, dim, **kw)
        self.self_key = LinearMap(dim, dim, **kw)
        self.self_value = LinearMap(dim, dim, **kw)
        self.self_out = LinearMap(dim, dim, init_mode="zero", dtype=dtype)
        self.text_query = LinearMap(dim, dim, **kw)
        self.text_key = LinearMap(dim, dim, **kw)
        self.text_value = LinearMap(dim, dim, **kw)
        self.text_out = LinearMap(dim, dim, init_mode="zero", dtype=dtype)
        self.ff_in = LinearMap(dim, hidden, **kw)
        self.ff_out = LinearMap(hidden, dim, init_mode="zero", dtype=dtype)
        # per-block offset added to the shared timestep projection
        self.modulation = nn.Parameter(torch.randn(6, dim, generator=gen, dtype=dtype) / math.sqrt(dim))

    def forward(self, x: torch.Tensor, text: torch.Tensor, e6: torch.Tensor) -> torch.Tensor:
        m = e6 + self.modulation
        sh_sa, sc_sa, sh_tx, sc_tx, sh_ff, sc_ff = m.unbind(-2)
        h = layer_norm(x) * (1 + sc_sa) + sh_sa
        x = x + self.self_out(
            multi_head_cross_attention(h, h, self.self_query, self.self_key, self.self_value, self.heads)
        )
        h = layer_norm(x) * (1 + sc_tx) + sh_tx
        x = x + self.text_out(
            multi_head_cross_attention(h, text, self.text_query, self.text_key, self.text_value, self.heads)
        )
        h = layer_norm(x) * (1 + sc_ff) + sh_ff
        x = x + self.ff_out(torch.nn.functional.silu(self.ff_in(h)))
        return x


class OutputHead(nn.Module):
    """Final norm-modulate-project back to latent channels.

    Deliberately not zero-initialized: the head's own modulation keeps the
    output sensitive to the noise level from the first step.
    """

    def __init__(self, dim: int, out_dim: int, gen: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.proj = LinearMap(dim, out_dim, gen=gen, dtype=dtype)
        self.modulation = nn.Parameter(torch.randn(2, dim, generator=gen, dtype=dtype) / math.sqrt(dim))

    def forward(self, x: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        m = e.unsqueeze(-2) + self.modulation
        shift, scale = m.unbind(-2)
        return self.proj(layer_norm(x) * (1 + scale) + shift)
