import numpy as np
import pytest
import torch

torch.set_num_threads(1)

F64 = torch.float64


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


def torch_gen(seed: int = 1234) -> torch.Generator:
    return torch.Generator().manual_seed(seed)


def tiny_config(**overrides):
    """Small data geometry most model-level tests share: 4 frames of 4 video
    tokens and 3 audio tokens, 5 latent channels."""
    from uavgen.data import DataConfig

    base = dict(
        frames=4, video_tokens=4, audio_tokens=3, channels=5,
        video_vocab=5, audio_vocab=7, region_tokens=2, cond_fraction=0.25,
    )
    base.update(overrides)
    return DataConfig(**base)


def build_model(cfg, *, depth=2, dim=16, audio_dim=None, heads=2,
                interaction=None, seed=0, dtype=F64, live=False):
    """Joint model sized to a data config. live=True randomizes the aligner
    output projections so the exchange actually moves features."""
    from uavgen.interaction import InteractionConfig
    from uavgen.model import BranchConfig, JointModel, randomize_silent_projections

    icfg = interaction if interaction is not None else InteractionConfig(heads=heads)
    video_cfg = BranchConfig(
        "video", depth=depth, dim=dim, heads=heads, ff_mult=2.0,
        latent_channels=cfg.channels, text_vocab=cfg.video_vocab,
        text_len=1, freq_dim=dim,
    )
    audio_cfg = BranchConfig(
        "audio", depth=depth, dim=audio_dim or dim, heads=heads, ff_mult=2.0,
        latent_channels=cfg.channels, text_vocab=cfg.audio_vocab,
        text_len=cfg.frames, freq_dim=dim,
    )
    model = JointModel(cfg.layout(dim), video_cfg, audio_cfg, icfg,
                       torch_gen(seed), dtype)
    if live:
        randomize_silent_projections(model, torch_gen(seed + 1))
    return model


def make_batch(kind, cfg, batch=2, dim=16, seed0=100, dtype=F64):
    from uavgen.data import generate_sample
    from uavgen.tasks import assemble

    samples = [generate_sample(cfg, seed0 + i) for i in range(batch)]
    return assemble(kind, samples, cfg, dim, dtype=dtype)


def batch_noise(cb, seed=7):
    """(noise_video, noise_audio) matching the batch's generation segments,
    None where a branch has nothing to generate."""
    rng = np.random.default_rng(seed)

    def draw(shape_src, present):
        if not present:
            return None
        return torch.as_tensor(rng.standard_normal(tuple(shape_src.shape)), dtype=shape_src.dtype)

    return (
        draw(cb.clean_video_gen(), cb.task.video_gen.present),
        draw(cb.clean_audio_gen(), cb.task.audio_gen.present),
    )


def numpy_attention(q, k, v, heads):
    """Reference multi-head attention written against numpy only.

    q [Lq, D], k/v [Lkv, D] are already-projected arrays. Heads are split on
    the feature axis, softmax is computed with the usual max subtraction, and
    head outputs are concatenated. No output projection.
    """
    Lq, D = q.shape
    dh = D // heads
    out = np.zeros((Lq, v.shape[1]), dtype=q.dtype)
    dv = v.shape[1] // heads
    for h in range(heads):
        qh = q[:, h * dh:(h + 1) * dh]
        kh = k[:, h * dh:(h + 1) * dh]
        vh = v[:, h * dv:(h + 1) * dv]
        logits = qh @ kh.T / np.sqrt(dh)
        logits = logits - logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w = w / w.sum(axis=1, keepdims=True)
        out[:, h * dv:(h + 1) * dv] = w @ vh
    return out
