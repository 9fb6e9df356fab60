import numpy as np
import pytest
import torch

from uavgen.errors import ConfigError, ShapeError
from uavgen.model import ModelOutput
from uavgen.sampling import GuidanceScales, combine_guidance, euler_sample, nullified_forward
from uavgen.tasks import training_input

from conftest import F64, batch_noise, build_model, make_batch, tiny_config, torch_gen

CFG = tiny_config()
T, NV, K, C = CFG.frames, CFG.video_tokens, CFG.audio_tokens, CFG.channels


def fields_for(kind="JointGen", seed=0):
    model = build_model(CFG, seed=seed, live=True)
    cb = make_batch(kind, CFG)
    nv, na = batch_noise(cb)
    inp, _, _ = training_input(cb, torch.full((2,), 0.6, dtype=F64), nv, na)
    with torch.no_grad():
        cond = model(inp, interaction=True)
        uncond = model(inp, interaction=False)
    return model, inp, cond, uncond


class TestCombineGuidance:
    def test_frozen_example(self):
        u = torch.tensor([1.0], dtype=F64)
        c = torch.tensor([2.0], dtype=F64)
        assert combine_guidance(u, c, 3.0).item() == 4.0

    def test_scale_zero_returns_the_silenced_field(self):
        _, _, cond, uncond = fields_for()
        out = combine_guidance(uncond.video_field, cond.video_field, 0.0)
        assert torch.all(out == uncond.video_field)

    def test_scale_one_returns_the_conditional_field_within_one_ulp(self):
        # u + 1*(c-u) rounds twice, once in the subtraction and once in the
        # addition; the bound is one ulp of each addend actually formed
        _, _, cond, uncond = fields_for()
        u, c = uncond.video_field, cond.video_field
        out = combine_guidance(u, c, 1.0)
        eps = torch.finfo(F64).eps
        tol = eps * ((c - u).abs() + c.abs())
        assert torch.all((out - c).abs() <= tol)

    def test_affine_in_the_scale(self):
        _, _, cond, uncond = fields_for()
        u, c = uncond.audio_field, cond.audio_field
        for s1, s2 in ((0.0, 2.0), (0.5, 3.5), (-1.0, 4.0)):
            lhs = combine_guidance(u, c, s1) + combine_guidance(u, c, s2)
            rhs = 2.0 * combine_guidance(u, c, (s1 + s2) / 2.0)
            assert torch.all((lhs - rhs).abs() <= 1e-12)

    def test_large_scale_extrapolates(self):
        u = torch.zeros(3, dtype=F64)
        c = torch.ones(3, dtype=F64)
        assert torch.all(combine_guidance(u, c, 2.0) == 2.0)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            combine_guidance(torch.zeros(2, 3, dtype=F64), torch.zeros(2, 4, dtype=F64), 1.0)


class TestNullifiedForward:
    def test_video_branch_ignores_audio_latents(self):
        model, inp, _, _ = fields_for()
        with torch.no_grad():
            base = nullified_forward(model, inp)
            inp.audio_tokens = torch.randn(
                *inp.audio_tokens.shape, generator=torch_gen(33), dtype=F64
            )
            poked = nullified_forward(model, inp)
        assert torch.equal(base.video_field, poked.video_field)
        assert not torch.equal(base.audio_field, poked.audio_field)

    def test_audio_branch_ignores_video_text(self):
        model, inp, _, _ = fields_for()
        with torch.no_grad():
            base = nullified_forward(model, inp)
            inp.video_text = (inp.video_text + 2) % CFG.video_vocab
            poked = nullified_forward(model, inp)
        assert torch.equal(base.audio_field, poked.audio_field)

    def test_interaction_breaks_the_invariance(self):
        model, inp, _, _ = fields_for()
        with torch.no_grad():
            base = model(inp, interaction=True)
            inp.audio_tokens = torch.randn(
                *inp.audio_tokens.shape, generator=torch_gen(34), dtype=F64
            )
            poked = model(inp, interaction=True)
        assert not torch.equal(base.video_field, poked.video_field)


class ConstantField:
    """Stub denoiser: fixed velocity everywhere, both guidance branches."""

    def __init__(self, cb, value_video, value_audio):
        self.cb = cb
        self.vv = value_video
        self.va = value_audio

    def __call__(self, inp, interaction=True, **kw):
        lay = self.cb.layout
        B = inp.video_tokens.shape[0]

        def field(has, cond, per, val):
            n = (lay.frames - cond) * per if has else 0
            return torch.full((B, n, C), val, dtype=F64)

        return ModelOutput(
            video_field=field(inp.video_has_gen, inp.video_cond_frames, lay.video_tokens, self.vv),
            audio_field=field(inp.audio_has_gen, inp.audio_cond_frames, lay.audio_tokens, self.va),
        )


class LinearField:
    """Stub denoiser: velocity proportional to the current latents."""

    def __init__(self, cb, a_video, a_audio):
        self.cb = cb
        self.av = a_video
        self.aa = a_audio

    def __call__(self, inp, interaction=True, **kw):
        lay = self.cb.layout
        sv = (1 + inp.video_cond_frames) * lay.video_tokens
        sa = (1 + inp.audio_cond_frames) * lay.audio_tokens
        return ModelOutput(
            video_field=self.av * inp.video_tokens[:, sv:],
            audio_field=self.aa * inp.audio_tokens[:, sa:],
        )


class TestEulerIntegration:
    def test_single_step_constant_field(self):
        cb = make_batch("JointGen", CFG)
        g = torch_gen(40)
        zv = torch.randn(2, T * NV, C, generator=g, dtype=F64)
        za = torch.randn(2, T * K, C, generator=g, dtype=F64)
        model = ConstantField(cb, 0.25, -0.5)
        video, audio = euler_sample(
            model, cb, steps=1, scales=GuidanceScales(3.0, 0.0), init_video=zv, init_audio=za
        )
        assert torch.equal(video.reshape(2, -1, C), zv - 0.25)
        assert torch.equal(audio.reshape(2, -1, C), za + 0.5)

    def test_matches_explicit_recursion_on_a_linear_field(self):
        cb = make_batch("JointGen", CFG)
        g = torch_gen(41)
        zv = torch.randn(2, T * NV, C, generator=g, dtype=F64)
        za = torch.randn(2, T * K, C, generator=g, dtype=F64)
        a, b = 0.7, -1.3
        steps = 7
        video, audio = euler_sample(
            LinearField(cb, a, b), cb, steps=steps,
            scales=GuidanceScales(1.7, 0.3), init_video=zv, init_audio=za,
        )
        ts = np.linspace(1.0, 0.0, steps + 1)
        ev, ea = zv.clone(), za.clone()
        for i in range(steps):
            dt = float(ts[i] - ts[i + 1])
            ev = ev - dt * (a * ev)
            ea = ea - dt * (b * ea)
        assert torch.equal(video.reshape(2, -1, C), ev)
        assert torch.equal(audio.reshape(2, -1, C), ea)

    def test_more_steps_track_the_exact_flow_better(self):
        # dz/dt = a z integrated from t=1 to 0 shrinks z by e^{-a}; Euler
        # converges to that as steps grow
        cb = make_batch("JointGen", CFG)
        zv = torch.randn(2, T * NV, C, generator=torch_gen(42), dtype=F64)
        za = torch.randn(2, T * K, C, generator=torch_gen(43), dtype=F64)
        a = 1.0
        exact = zv * np.exp(-a)
        errs = []
        for steps in (4, 16, 64):
            video, _ = euler_sample(
                LinearField(cb, a, a), cb, steps=steps,
                scales=GuidanceScales(1.0, 1.0), init_video=zv, init_audio=za,
            )
            errs.append((video.reshape(2, -1, C) - exact).abs().max().item())
        assert errs[0] > errs[1] > errs[2]


class TestEulerWithModel:
    def test_conditioning_prefix_is_byte_identical(self):
        model = build_model(CFG, live=True)
        cb = make_batch("JointContinuation", CFG)
        video, audio = euler_sample(model, cb, steps=3, rng=np.random.default_rng(5))
        cut = cb.video_cond_frames
        assert torch.equal(video[:, :cut], cb.video[:, 1 : 1 + cut])
        assert torch.equal(audio[:, : cb.audio_cond_frames], cb.audio[:, 1 : 1 + cb.audio_cond_frames])
        assert not torch.equal(video[:, cut:], cb.video[:, 1 + cut :])

    def test_source_only_video_returned_clean(self):
        model = build_model(CFG, live=True)
        cb = make_batch("V2ADubbing", CFG)
        video, audio = euler_sample(model, cb, steps=3, rng=np.random.default_rng(6))
        assert torch.equal(video, cb.video[:, 1:])
        assert audio.shape == (2, T, K, C)
        assert not torch.equal(audio, cb.audio[:, 1:])

    def test_source_only_audio_returned_clean(self):
        model = build_model(CFG, live=True)
        cb = make_batch("A2VSynthesis", CFG)
        video, audio = euler_sample(model, cb, steps=3, rng=np.random.default_rng(7))
        assert torch.equal(audio, cb.audio[:, 1:])
        assert not torch.equal(video, cb.video[:, 1:])

    def test_deterministic_per_rng_seed(self):
        model = build_model(CFG, live=True)
        cb = make_batch("JointGen", CFG)
        v1, a1 = euler_sample(model, cb, steps=4, rng=np.random.default_rng(11))
        v2, a2 = euler_sample(model, cb, steps=4, rng=np.random.default_rng(11))
        v3, _ = euler_sample(model, cb, steps=4, rng=np.random.default_rng(12))
        assert torch.equal(v1, v2) and torch.equal(a1, a2)
        assert not torch.equal(v1, v3)

    def test_explicit_init_overrides_rng(self):
        model = build_model(CFG, live=True)
        cb = make_batch("JointGen", CFG)
        g = torch_gen(44)
        zv = torch.randn(2, T * NV, C, generator=g, dtype=F64)
        za = torch.randn(2, T * K, C, generator=g, dtype=F64)
        v1, a1 = euler_sample(model, cb, steps=2, init_video=zv, init_audio=za)
        v2, a2 = euler_sample(
            model, cb, steps=2, init_video=zv, init_audio=za, rng=np.random.default_rng(1)
        )
        assert torch.equal(v1, v2) and torch.equal(a1, a2)

    def test_guidance_scale_changes_the_result(self):
        model = build_model(CFG, live=True)
        cb = make_batch("JointGen", CFG)
        g = torch_gen(45)
        zv = torch.randn(2, T * NV, C, generator=g, dtype=F64)
        za = torch.randn(2, T * K, C, generator=g, dtype=F64)
        v1, _ = euler_sample(model, cb, steps=2, scales=GuidanceScales(0.0, 0.0),
                             init_video=zv, init_audio=za)
        v2, _ = euler_sample(model, cb, steps=2, scales=GuidanceScales(3.0, 3.0),
                             init_video=zv, init_audio=za)
        assert not torch.equal(v1, v2)

    def test_validation(self):
        model = build_model(CFG, live=True)
        cb = make_batch("JointGen", CFG)
        with pytest.raises(ConfigError):
            euler_sample(model, cb, steps=0, rng=np.random.default_rng(0))
        with pytest.raises(ConfigError):
            euler_sample(model, cb, steps=2)  # no rng, no explicit init
        with pytest.raises(ShapeError):
            euler_sample(model, cb, steps=2, init_video=torch.zeros(2, 3, C, dtype=F64),
                         init_audio=torch.zeros(2, T * K, C, dtype=F64))
