"""Synthetic paired clips with an exactly known cross-modal coupling.

Each sample owns a smooth scalar trace (a unit-variance Gaussian process over
frames). On the video side the trace is written into one latent channel, but
only inside a contiguous "salient" run of token slots whose position varies
per sample; an indicator channel marks the run, and the slots outside it
carry decoy traces statistically identical to the real one. On the audio
side the same trace appears as an envelope channel, resampled to the audio
token rate with exactly the blend rule the video-to-audio aligner uses
(token j mixes frames j//k and j//k + 1 with weight (j mod k)/k; the final
frame's tokens repeat its value).

Everything else in the latents is either text-predictable (style and symbol
patterns from fixed vocabularies) or noise. Crucially the trace is independent
of the text, so the only route to matching the two modalities' traces at
generation time is the cross-modal exchange. That makes the consistency
score at the bottom an honest measure of how much the aligners help.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError, UndefinedScore
from .layout import FrameLayout

VIDEO_REGION_CH = 0   # salient-run indicator
VIDEO_COUPLE_CH = 1   # trace inside the run, decoys outside
VIDEO_STYLE_CH = 2    # style-token pattern
AUDIO_ENV_CH = 0      # resampled trace
AUDIO_SYMBOL_CH = 1   # per-frame symbol pattern
AUDIO_DECOY_CH = 2    # an unrelated smooth envelope

_BASIS_SEED = 0x57B1E  # fixed so pattern tables are part of the data law


@dataclass(frozen=True)
class DataConfig:
    frames: int = 8
    video_tokens: int = 16
    audio_tokens: int = 4
    channels: int = 6
    video_vocab: int = 8
    audio_vocab: int = 12
    region_tokens: int = 4
    # The length scale keeps adjacent frames under ~0.5 correlated and the
    # decoys loud: both are load-bearing. A smoother trace (or quieter decoys)
    # lets a fully global exchange learn the time alignment from the branches'
    # positional tags within the default training budget, which flattens the
    # topology contrasts the ablation grid exists to expose.
    trace_scale: float = 0.8   # GP length scale, in frames
    noise: float = 0.3
    style_amp: float = 1.0
    decoy_amp: float = 2.0
    cond_fraction: float = 0.25

    def __post_init__(self):
        if self.frames < 2:
            raise ConfigError("need at least two frames for a coupling trace")
        if self.audio_tokens < 1 or self.video_tokens < 1:
            raise ConfigError("tokens per frame must be positive")
        if not 1 <= self.region_tokens <= self.video_tokens:
            raise ConfigError("salient run must fit inside a frame row")
        if self.channels < 4:
            raise ConfigError("need at least four latent channels")
        if self.trace_scale <= 0:
            raise ConfigError("trace_scale must be positive")

    def layout(self, dim: int) -> FrameLayout:
        return FrameLayout(
            frames=self.frames,
            video_tokens=self.video_tokens,
            audio_tokens=self.audio_tokens,
            dim=dim,
        )


@dataclass
class SyntheticSample:
    video: np.ndarray       # [T, Nv, C]
    audio: np.ndarray       # [T, k, C]
    style: int
    symbols: np.ndarray     # [T] int64
    region_start: int
    gt_mask: np.ndarray     # [T, Nv] in {0,1}
    trace: np.ndarray       # [T]


def gp_trace(rng: np.random.Generator, n: int, scale: float) -> np.ndarray:
    """Unit-variance Gaussian process with a squared-exponential kernel."""
    idx = np.arange(n, dtype=np.float64)
    cov = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / scale) ** 2)
    cov[np.diag_indices(n)] += 1e-9
    return np.linalg.cholesky(cov) @ rng.standard_normal(n)


def resample_trace(trace: np.ndarray, k: int) -> np.ndarray:
    """Frame-rate series -> audio-token-rate series, by the aligner's rule."""
    T = trace.shape[0]
    j = np.arange(T * k)
    i = j // k
    alpha = (j % k) / k
    right = np.minimum(i + 1, T - 1)
    out = (1.0 - alpha) * trace[i] + alpha * trace[right]
    out[i == T - 1] = trace[T - 1]
    return out


def _basis(kind: str, vocab: int, width: int) -> np.ndarray:
    tag = zlib.crc32(kind.encode())  # stable across processes, unlike hash()
    rng = np.random.default_rng([_BASIS_SEED, tag, vocab, width])
    return rng.standard_normal((vocab, width))


def style_basis(cfg: DataConfig) -> np.ndarray:
    return _basis("style", cfg.video_vocab, cfg.video_tokens)


def symbol_basis(cfg: DataConfig) -> np.ndarray:
    return _basis("symbol", cfg.audio_vocab, cfg.audio_tokens)


def generate_sample(cfg: DataConfig, seed: int) -> SyntheticSample:
    """Deterministic per (cfg, seed)."""
    rng = np.random.default_rng([int(seed), 0x5EED])
    T, Nv, k, C = cfg.frames, cfg.video_tokens, cfg.audio_tokens, cfg.channels

    style = int(rng.integers(cfg.video_vocab))
    symbols = rng.integers(cfg.audio_vocab, size=T).astype(np.int64)
    start = int(rng.integers(0, Nv - cfg.region_tokens + 1))
    trace = gp_trace(rng, T, cfg.trace_scale)

    mask = np.zeros((T, Nv))
    mask[:, start:start + cfg.region_tokens] = 1.0

    video = np.zeros((T, Nv, C))
    video[..., VIDEO_REGION_CH] = mask
    # coupling channel: the trace inside the run, look-alike decoys outside
    inside = mask.astype(bool)
    video[..., VIDEO_COUPLE_CH] = np.where(inside, trace[:, None], 0.0)
    n_bg = Nv - cfg.region_tokens
    if n_bg > 0:
        m1 = gp_trace(rng, T, cfg.trace_scale)
        m2 = gp_trace(rng, T, cfg.trace_scale)
        coef = rng.standard_normal((2, n_bg)) / np.sqrt(2.0)
        bg = (m1[:, None] * coef[0] + m2[:, None] * coef[1]) * cfg.decoy_amp
        outside_cols = np.where(mask[0] == 0.0)[0]
        video[:, outside_cols, VIDEO_COUPLE_CH] = bg
    video[..., VIDEO_STYLE_CH] = style_basis(cfg)[style][None, :] * cfg.style_amp
    if C > 3:
        video[..., 3] = gp_trace(rng, T, cfg.trace_scale)[:, None] * cfg.decoy_amp
    if C > 4:
        video[..., 4:] = rng.standard_normal((T, Nv, C - 4)) * cfg.noise

    audio = np.zeros((T, k, C))
    audio[..., AUDIO_ENV_CH] = resample_trace(trace, k).reshape(T, k)
    audio[..., AUDIO_SYMBOL_CH] = symbol_basis(cfg)[symbols] * cfg.style_amp
    audio[..., AUDIO_DECOY_CH] = (
        resample_trace(gp_trace(rng, T, cfg.trace_scale), k).reshape(T, k) * cfg.decoy_amp
    )
    if C > 3:
        audio[..., 3:] = rng.standard_normal((T, k, C - 3)) * cfg.noise

    return SyntheticSample(
        video=video, audio=audio, style=style, symbols=symbols,
        region_start=start, gt_mask=mask, trace=trace,
    )


def _as_numpy(x) -> np.ndarray:
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def decode_video_trace(video, region_channel=VIDEO_REGION_CH, couple_channel=VIDEO_COUPLE_CH) -> np.ndarray:
    """Per-frame coupling estimate: mean of the coupling channel over tokens
    the indicator marks salient (falling back to the whole frame row when a
    frame marks nothing)."""
    v = _as_numpy(video)
    if v.ndim != 3:
        raise ShapeError(f"expected [T, Nv, C] video latents, got {v.shape}")
    sel = v[..., region_channel] > 0.5
    T = v.shape[0]
    out = np.empty(T)
    for i in range(T):
        cols = sel[i]
        vals = v[i, cols, couple_channel] if cols.any() else v[i, :, couple_channel]
        out[i] = vals.mean()
    return out


def consistency_score(video, audio, k: int) -> float:
    """Pearson correlation between the decoded video coupling trace
    (resampled to the audio token rate) and the audio envelope channel.

    1.0 means the generated pair moves together exactly as training pairs
    do. Raises UndefinedScore when either series is (numerically) constant.
    """
    a = _as_numpy(audio)
    if a.ndim == 3:
        a = a.reshape(-1, a.shape[-1])
    if a.ndim != 2:
        raise ShapeError(f"expected audio latents [T*k, C] or [T, k, C], got {a.shape}")
    env = a[:, AUDIO_ENV_CH]
    v_trace = resample_trace(decode_video_trace(video), k)
    if v_trace.shape != env.shape:
        raise ShapeError("video and audio disagree on timeline length")
    vs, es = v_trace.std(), env.std()
    if vs < 1e-9 or es < 1e-9:
        raise UndefinedScore("constant series; correlation undefined")
    vc, ec = v_trace - v_trace.mean(), env - env.mean()
    return float((vc * ec).mean() / (vs * es))


TASK_KINDS = (
    "JointGen",
    "JointGenRefAudio",
    "JointContinuation",
    "V2ADubbing",
    "A2VSynthesis",
)
DEFAULT_TASK_RATIOS = (4, 1, 1, 2, 2)


def task_probabilities(ratios: Sequence[float]) -> np.ndarray:
    r = np.asarray(ratios, dtype=np.float64)
    if r.shape != (len(TASK_KINDS),):
        raise ConfigError(f"need {len(TASK_KINDS)} ratios, got {r.shape}")
    if np.any(r < 0) or r.sum() <= 0:
        raise ConfigError("ratios must be nonnegative with positive sum")
    return r / r.sum()


def draw_task(rng: np.random.Generator, ratios: Sequence[float] = DEFAULT_TASK_RATIOS) -> str:
    """One scheduler draw; i.i.d. across calls by construction."""
    return TASK_KINDS[int(rng.choice(len(TASK_KINDS), p=task_probabilities(ratios)))]
