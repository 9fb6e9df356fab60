"""Low-level numeric primitives.

Everything downstream (aligners, branch blocks, mask heads) is built from the
small surface in this file, so the contracts here are deliberately strict:
`layer_norm` normalizes the trailing feature axis with no affine part,
`multi_head_cross_attention` returns concatenated head outputs without an
output projection, and `sigmoid` is guaranteed to stay inside the open
interval (0, 1) at any finite input and dtype.
"""

from __future__ import annotations

import math
from typing import Callable, Optional

import torch
from torch import nn

from .errors import OracleFailure, ShapeError

DTYPE_NAMES = {"f32": torch.float32, "f64": torch.float64}


def resolve_dtype(name: str) -> torch.dtype:
    try:
        return DTYPE_NAMES[name]
    except KeyError:
        raise ShapeError(f"unknown precision {name!r}, expected one of {sorted(DTYPE_NAMES)}")


def layer_norm(x: torch.Tensor, eps: float = 0.0) -> torch.Tensor:
    """Normalize the last axis to zero mean and unit variance.

    Biased variance (divide by D), no learned scale or shift. Affine
    parameters, where a caller wants them, are applied separately so that
    the normalization itself stays invariant to per-row shift and scale.
    """
    if x.ndim < 1 or x.shape[-1] < 1:
        raise ShapeError(f"layer_norm needs a non-empty trailing axis, got shape {tuple(x.shape)}")
    return torch.nn.functional.layer_norm(x, (x.shape[-1],), eps=eps)


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    """Logistic function clamped to the open interval (0, 1).

    At |x| beyond roughly 37 (f64) the exact logistic rounds to 0.0 or 1.0;
    downstream gates rely on never multiplying by an exact 0 or 1, so the
    output is pinned to the nearest representable interior value instead.
    """
    finfo = torch.finfo(x.dtype)
    one = torch.ones((), dtype=x.dtype)
    hi = torch.nextafter(one, torch.zeros((), dtype=x.dtype))
    lo = torch.full((), finfo.tiny, dtype=x.dtype)
    return torch.clamp(torch.sigmoid(x), min=lo, max=hi)


class LinearMap(nn.Module):
    r"""Dense map y = W x + b with explicit, generator-driven initialization.

    Args:
        in_features: input width.
        out_features: output width.
        bias: include an additive bias (initialized to zero).
        init_mode: "scaled_random" draws W uniformly with Xavier bounds;
            "zero" sets every entry of W (and b) to exactly 0.0, used for
            projections that must be silent at construction.
        gen: torch.Generator consumed by "scaled_random". Required there so
            that model construction is reproducible without global RNG state.
    """

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        init_mode: str = "scaled_random",
        gen: Optional[torch.Generator] = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if init_mode not in ("scaled_random", "zero"):
            raise ShapeError(f"unknown init_mode {init_mode!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.init_mode = init_mode
        self.weight = nn.Parameter(torch.empty(out_features, in_features, dtype=dtype))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=dtype)) if bias else None
        if init_mode == "zero":
            with torch.no_grad():
                self.weight.zero_()
        else:
            if gen is None:
                raise ShapeError("scaled_random init needs a generator")
            bound = math.sqrt(6.0 / (in_features + out_features))
            with torch.no_grad():
                self.weight.uniform_(-bound, bound, generator=gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.nn.functional.linear(x, self.weight, self.bias)

    def extra_repr(self) -> str:
        return (
            f"in={self.in_features}, out={self.out_features}, "
            f"bias={self.bias is not None}, init={self.init_mode}"
        )


class AffineNormParams(nn.Module):
    """Learned per-feature scale and shift, identity at construction.

    gamma starts at 1 and beta at 0, so `apply(layer_norm(x))` equals plain
    layer_norm until training moves them.
    """

    def __init__(self, dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim, dtype=dtype))
        self.beta = nn.Parameter(torch.zeros(dim, dtype=dtype))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.gamma * x + self.beta


def split_heads(x: torch.Tensor, heads: int) -> torch.Tensor:
    # [..., L, D] -> [..., heads, L, D/heads]
    if x.shape[-1] % heads != 0:
        raise ShapeError(f"feature dim {x.shape[-1]} not divisible by {heads} heads")
    *lead, L, D = x.shape
    return x.view(*lead, L, heads, D // heads).transpose(-3, -2)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    # [..., heads, L, Dh] -> [..., L, heads*Dh]
    *lead, H, L, Dh = x.shape
    return x.transpose(-3, -2).reshape(*lead, L, H * Dh)


def multi_head_cross_attention(
    q_in: torch.Tensor,
    kv_in: torch.Tensor,
    w_q: LinearMap,
    w_k: LinearMap,
    w_v: LinearMap,
    heads: int,
) -> torch.Tensor:
    """Scaled dot-product cross-attention, heads concatenated, no output map.

    q_in is [..., Lq, Dq] and kv_in is [..., Lkv, Dkv]; leading batch axes
    broadcast through. The projections decide the attention width: w_q and
    w_k must agree on their output dim, and the returned tensor has w_v's
    output dim. Softmax runs at the tensor's own dtype; scale is
    1/sqrt(width/heads). No dropout anywhere.
    """
    if q_in.ndim < 2 or kv_in.ndim < 2:
        raise ShapeError("attention inputs need at least [L, D] shapes")
    if w_q.out_features != w_k.out_features:
        raise ShapeError("query and key projections disagree on attention width")
    q = split_heads(w_q(q_in), heads)
    k = split_heads(w_k(kv_in), heads)
    v = split_heads(w_v(kv_in), heads)
    scale = 1.0 / math.sqrt(w_q.out_features / heads)
    logits = torch.matmul(q, k.transpose(-1, -2)) * scale
    weights = torch.softmax(logits, dim=-1)
    return merge_heads(torch.matmul(weights, v))


def central_difference(f: Callable[[], torch.Tensor], param: torch.Tensor, idx: tuple, h: float) -> float:
    """One central-difference partial derivative of f with respect to
    param[idx], evaluated by mutating the tensor in place and restoring it."""
    with torch.no_grad():
        orig = param[idx].item()
        param[idx] = orig + h
        f_plus = float(f())
        param[idx] = orig - h
        f_minus = float(f())
        param[idx] = orig
    if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
        raise OracleFailure(f"non-finite objective at perturbed coordinate {idx}")
    return (f_plus - f_minus) / (2.0 * h)


def finite_diff_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Full finite-difference gradient of a scalar objective.

    Central differences per coordinate: (f(x + h e_i) - f(x - h e_i)) / 2h.
    Independent of autograd on purpose; this is the reference the analytic
    gradients are judged against. Raises OracleFailure if the objective
    returns a non-finite value anywhere.
    """
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat_x = x.view(-1)
    flat_g = grad.view(-1)
    for i in range(flat_x.numel()):
        orig = flat_x[i].item()
        flat_x[i] = orig + h
        f_plus = float(f(x))
        flat_x[i] = orig - h
        f_minus = float(f(x))
        flat_x[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise OracleFailure(f"non-finite objective at flat coordinate {i}")
        flat_g[i] = (f_plus - f_minus) / (2.0 * h)
    return grad
