"""Self-contained invariant suite: every structural property the design
leans on, re-checked against a freshly built model. One pass/fail line per
invariant; any failure flips the process exit code.

The zero-init neutrality check accepts a corruption switch that fills the
exchange output projections with random values before checking. That run is
supposed to fail; it proves the check actually measures the projections
instead of vacuously passing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np
import torch

from .checkpoint import read_checkpoint, save_checkpoint
from .config import RunConfig, parse_config, print_config
from .data import DataConfig, TASK_KINDS, draw_task, generate_sample, task_probabilities
from .flow import joint_loss, velocity_loss
from .gradcheck import check_model_gradients
from .interaction import AlignerPair, InteractionConfig, a2v_update, v2a_update
from .maskgate import MaskHead, MaskSchedule, mask_loss
from .model import BranchConfig, JointModel, randomize_silent_projections
from .sampling import GuidanceScales, combine_guidance, euler_sample
from .tasks import assemble, training_input
from .train import build_optimizer, decay_schedule, train_step


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _gen(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def _small_data(frames: int = 4) -> DataConfig:
    return DataConfig(
        frames=frames, video_tokens=4, audio_tokens=3, channels=5,
        video_vocab=5, audio_vocab=7, region_tokens=2,
    )


def _small_model(dtype: torch.dtype, seed: int = 0, mask_gating: bool = True) -> Tuple[JointModel, DataConfig]:
    cfg = _small_data()
    video = BranchConfig(modality="video", depth=2, dim=16, heads=2, ff_mult=2.0,
                         latent_channels=cfg.channels, text_vocab=cfg.video_vocab,
                         text_len=1, freq_dim=16)
    audio = BranchConfig(modality="audio", depth=2, dim=16, heads=2, ff_mult=2.0,
                         latent_channels=cfg.channels, text_vocab=cfg.audio_vocab,
                         text_len=cfg.frames, freq_dim=16)
    inter = InteractionConfig(a2v="windowed", v2a="windowed", window=1, heads=2,
                              mask_gating=mask_gating)
    model = JointModel(cfg.layout(16), video, audio, inter, gen=_gen(seed), dtype=dtype)
    return model, cfg


def _batch(cfg: DataConfig, dtype: torch.dtype, kind: str = "JointGen", n: int = 2, seed0: int = 40):
    samples = [generate_sample(cfg, seed0 + i) for i in range(n)]
    return assemble(kind, samples, cfg, 16, dtype)


def check_gradients(dtype: torch.dtype, seed: int) -> Tuple[bool, str]:
    """Finite differences vs autograd over every parameter of a joint model."""
    f64 = dtype == torch.float64
    model, cfg = _small_model(torch.float64 if f64 else torch.float32, seed=seed)
    cb = _batch(cfg, model.dtype)
    t = torch.full((2,), 0.55, dtype=model.dtype)
    rng = np.random.default_rng(seed + 1)
    nv = torch.as_tensor(rng.standard_normal(tuple(cb.clean_video_gen().shape)), dtype=model.dtype)
    na = torch.as_tensor(rng.standard_normal(tuple(cb.clean_audio_gen().shape)), dtype=model.dtype)
    inp, tv, ta = training_input(cb, t, nv, na)

    def objective() -> torch.Tensor:
        out = model(inp)
        return joint_loss(
            velocity_loss(out.video_field, tv),
            velocity_loss(out.audio_field, ta),
            mask_loss(out.masks, cb.gt_mask),
            0.1,
        )

    kw = dict(coords_per_param=2, seed=seed)
    if f64:
        report = check_model_gradients(model, objective, h=1e-5, rtol=1e-4, atol=1e-8, **kw)
    else:
        # f32 arithmetic noise forces a larger step and a looser bound
        report = check_model_gradients(model, objective, h=2e-2, rtol=1e-1, atol=2e-5, **kw)
    return report.ok, f"max rel err {report.max_rel_err:.3g} over {len(report.records)} coords"


def check_neutrality(dtype: torch.dtype, seed: int, corrupt: bool) -> Tuple[bool, str]:
    """At construction the exchange is silent: joint == unimodal, bitwise."""
    model, cfg = _small_model(dtype, seed=seed)
    if corrupt:
        randomize_silent_projections(model, _gen(seed + 99))
    cb = _batch(cfg, dtype)
    t = torch.full((2,), 0.4, dtype=dtype)
    rng = np.random.default_rng(seed + 2)
    nv = torch.as_tensor(rng.standard_normal(tuple(cb.clean_video_gen().shape)), dtype=dtype)
    na = torch.as_tensor(rng.standard_normal(tuple(cb.clean_audio_gen().shape)), dtype=dtype)
    inp, _, _ = training_input(cb, t, nv, na)
    with torch.no_grad():
        joint = model(inp, interaction=True)
        alone = model(inp, interaction=False)
    diff = max(
        float((joint.video_field - alone.video_field).abs().max()),
        float((joint.audio_field - alone.audio_field).abs().max()),
    )
    return diff == 0.0, f"max |joint - unimodal| = {diff:.3g}"


def check_a2v_locality(dtype: torch.dtype, seed: int) -> Tuple[bool, str]:
    """Window 1: a video frame's update ignores audio beyond one frame away."""
    gen = _gen(seed + 3)
    pair = AlignerPair(16, 16, heads=2, gen=gen, dtype=dtype)
    randomize_silent_projections_pair(pair, _gen(seed + 4))
    T, Nv, k = 6, 4, 3
    video = torch.randn(1, T, Nv, 16, generator=gen, dtype=dtype)
    audio = torch.randn(1, T, k, 16, generator=gen, dtype=dtype)
    with torch.no_grad():
        base = a2v_update(video, audio, pair, window=1)
        poked = audio.clone()
        poked[:, 2] += 5.0  # frame 0 reads frames {0, 1} only
        after = a2v_update(video, poked, pair, window=1)
    delta_far = float((after[:, 0] - base[:, 0]).abs().max())
    delta_near = float((after[:, 1] - base[:, 1]).abs().max())
    return delta_far == 0.0 and delta_near > 0.0, (
        f"frame 0 moved {delta_far:.3g}, frame 1 moved {delta_near:.3g}"
    )


def check_v2a_locality(dtype: torch.dtype, seed: int) -> Tuple[bool, str]:
    """Audio tokens in frame i read video frames i and i+1 only."""
    gen = _gen(seed + 5)
    pair = AlignerPair(16, 16, heads=2, gen=gen, dtype=dtype)
    randomize_silent_projections_pair(pair, _gen(seed + 6))
    T, Nv, k = 6, 4, 3
    video = torch.randn(1, T, Nv, 16, generator=gen, dtype=dtype)
    audio = torch.randn(1, T, k, 16, generator=gen, dtype=dtype)
    with torch.no_grad():
        base = v2a_update(audio, video, pair)  # flat tokens [1, T*k, D]
        poked = video.clone()
        poked[:, 2] += 5.0  # frame 0 tokens interpolate frames {0, 1} only
        after = v2a_update(audio, poked, pair)
    delta = (after - base).abs().amax(dim=-1)[0]
    delta_far = float(delta[:k].max())  # frame 0's tokens
    delta_near = float(delta[k:2 * k].max())  # frame 1's interior tokens blend frame 2
    return delta_far == 0.0 and delta_near > 0.0, (
        f"frame 0 tokens moved {delta_far:.3g}, frame 1 tokens moved {delta_near:.3g}"
    )


def check_guidance_algebra(dtype: torch.dtype, seed: int) -> Tuple[bool, str]:
    gen = _gen(seed + 7)
    u = torch.randn(64, generator=gen, dtype=dtype)
    c = torch.randn(64, generator=gen, dtype=dtype) * 3.0
    eps = torch.finfo(dtype).eps
    s1 = combine_guidance(u, c, 1.0)
    bound = eps * ((c - u).abs() + c.abs())
    ok1 = bool(((s1 - c).abs() <= bound).all())
    ok0 = bool((combine_guidance(u, c, 0.0) == u).all())
    lin = combine_guidance(u, c, 2.5) - combine_guidance(u, c, 0.5) - 2.0 * (c - u)
    okl = float(lin.abs().max()) <= 1e-12 if dtype == torch.float64 else float(lin.abs().max()) <= 1e-4
    return ok1 and ok0 and okl, (
        f"s=1 within bound: {ok1}, s=0 exact: {ok0}, linearity residual {float(lin.abs().max()):.3g}"
    )


def check_scheduler_frequencies(seed: int) -> Tuple[bool, str]:
    ratios = (4.0, 1.0, 1.0, 2.0, 2.0)
    rng = np.random.default_rng([seed, 0xF4E9])
    n = 100_000
    counts = {k: 0 for k in TASK_KINDS}
    for _ in range(n):
        counts[draw_task(rng, ratios)] += 1
    probs = task_probabilities(ratios)
    worst = max(abs(counts[k] / n - p) for k, p in zip(TASK_KINDS, probs))
    return worst <= 0.01, f"max |empirical - target| = {worst:.4f} over {n} draws"


def check_mask_contract(dtype: torch.dtype, seed: int) -> Tuple[bool, str]:
    gen = _gen(seed + 8)
    head = MaskHead(16, gen=gen, dtype=dtype)
    x = torch.randn(2, 4, 5, 16, generator=gen, dtype=dtype) * 20.0
    with torch.no_grad():
        m = head(x)
        gt = (torch.rand(2, 4, 5, generator=gen, dtype=dtype) > 0.5).to(dtype)
        zero_iff = float(mask_loss([gt], gt)) == 0.0 and float(mask_loss([m], gt)) > 0.0
    in_open = bool((m > 0).all() and (m < 1).all())
    sched = MaskSchedule(initial=0.1, total_steps=100, mode="decay")
    endpoints = sched.weight_at(0) == 0.1 and sched.weight_at(100) == 0.0
    return in_open and zero_iff and endpoints, (
        f"open interval: {in_open}, loss zero iff equal: {zero_iff}, endpoints: {endpoints}"
    )


def check_conditional_preservation(dtype: torch.dtype, seed: int) -> Tuple[bool, str]:
    """Sampler outputs keep clean prefixes and source segments byte-exact."""
    model, cfg = _small_model(dtype, seed=seed)
    randomize_silent_projections(model, _gen(seed + 9))
    rng = np.random.default_rng(seed + 10)
    cont = _batch(cfg, dtype, kind="JointContinuation")
    v, a = euler_sample(model, cont, steps=3, scales=GuidanceScales(1.5, 1.5), rng=rng)
    cv, ca = cont.video_cond_frames, cont.audio_cond_frames
    ok_v = torch.equal(v[:, :cv], cont.video[:, 1:1 + cv]) and not torch.equal(
        v[:, cv:], cont.video[:, 1 + cv:]
    )
    ok_a = torch.equal(a[:, :ca], cont.audio[:, 1:1 + ca])
    dub = _batch(cfg, dtype, kind="V2ADubbing")
    dv, _ = euler_sample(model, dub, steps=3, scales=GuidanceScales(1.5, 1.5),
                         rng=np.random.default_rng(seed + 11))
    ok_dub = torch.equal(dv, dub.video[:, 1:])
    return ok_v and ok_a and ok_dub, (
        f"continuation prefixes: {ok_v and ok_a}, dubbing source intact: {ok_dub}"
    )


def check_checkpoint_roundtrip(dtype: torch.dtype, seed: int, tmp_dir: str) -> Tuple[bool, str]:
    import os

    cfg = RunConfig()
    cfg.model.depth, cfg.model.dim, cfg.model.heads, cfg.model.ff_mult = 2, 16, 2, 2.0
    cfg.data.frames, cfg.data.video_tokens, cfg.data.audio_tokens = 4, 4, 3
    cfg.data.channels, cfg.data.region_tokens = 5, 2
    cfg.data.video_vocab, cfg.data.audio_vocab = 5, 7
    cfg.schedule.batch = 2
    cfg.schedule.stage1_steps = 0  # step 1 lands in the joint stage: every param gets moments
    cfg.run.precision = "f64" if dtype == torch.float64 else "f32"
    cfg.run.seed = seed
    model = cfg.build_model(_gen(seed))
    opt = build_optimizer(model, cfg)
    train_step(model, opt, cfg, 1, decay_schedule(cfg))
    path = os.path.join(tmp_dir, "roundtrip.uavg")
    save_checkpoint(path, model, opt, 1, print_config(cfg))
    ckpt = read_checkpoint(path)
    params_ok = all(
        torch.equal(ckpt.params[n], p.detach()) for n, p in model.named_parameters()
    )
    moments = {k: v for k, v in ckpt.opt_state.items()}
    live = opt.state_dict()["state"]
    opt_ok = all(
        torch.equal(moments[f"{i}.{key}"], torch.as_tensor(val))
        for i in live for key, val in live[i].items()
    )
    cfg_ok = parse_config(ckpt.config_text) == cfg
    return params_ok and opt_ok and cfg_ok, (
        f"params bitwise: {params_ok}, optimizer bitwise: {opt_ok}, config echo: {cfg_ok}"
    )


def check_config_fixpoint() -> Tuple[bool, str]:
    cfg = parse_config(print_config(RunConfig()))
    again = parse_config(print_config(cfg))
    return again == cfg, "parse(print(parse(text))) == parse(text)"


def randomize_silent_projections_pair(pair: AlignerPair, gen: torch.Generator, scale: float = 0.05):
    with torch.no_grad():
        for lin in (pair.a2v_out, pair.v2a_out):
            lin.weight.normal_(0.0, scale, generator=gen)
            if lin.bias is not None:
                lin.bias.normal_(0.0, scale, generator=gen)


def run_checks(
    precision: str = "f64",
    corrupt_zero_init: bool = False,
    seed: int = 0,
    tmp_dir: Optional[str] = None,
) -> List[CheckResult]:
    import tempfile

    dtype = torch.float64 if precision == "f64" else torch.float32
    own_tmp = None
    if tmp_dir is None:
        own_tmp = tempfile.TemporaryDirectory(prefix="uavgen-check-")
        tmp_dir = own_tmp.name

    suite: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
        ("gradient-suite", lambda: check_gradients(dtype, seed)),
        ("zero-init-neutrality", lambda: check_neutrality(dtype, seed, corrupt_zero_init)),
        ("a2v-locality", lambda: check_a2v_locality(dtype, seed)),
        ("v2a-locality", lambda: check_v2a_locality(dtype, seed)),
        ("guidance-algebra", lambda: check_guidance_algebra(dtype, seed)),
        ("scheduler-frequencies", lambda: check_scheduler_frequencies(seed)),
        ("mask-contract", lambda: check_mask_contract(dtype, seed)),
        ("conditional-preservation", lambda: check_conditional_preservation(dtype, seed)),
        ("checkpoint-roundtrip", lambda: check_checkpoint_roundtrip(dtype, seed, tmp_dir)),
        ("config-fixpoint", check_config_fixpoint),
    ]
    results = []
    for name, fn in suite:
        t0 = time.monotonic()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashed check is a failed check, not a crashed suite
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append(CheckResult(name, ok, f"{detail} [{time.monotonic() - t0:.2f}s]"))
    if own_tmp is not None:
        own_tmp.cleanup()
    return results


def format_results(results: List[CheckResult]) -> str:
    lines = [f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}" for r in results]
    n_fail = sum(not r.ok for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
