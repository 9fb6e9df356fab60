import numpy as np
import pytest
import torch

from uavgen.blocks import Block, OutputHead, TimestepEmbedder, sinusoidal_embedding
from uavgen.data import TASK_KINDS
from uavgen.errors import ConfigError, ShapeError
from uavgen.flow import velocity_loss
from uavgen.interaction import InteractionConfig
from uavgen.model import (
    BranchConfig,
    JointModel,
    ModelInput,
    randomize_silent_projections,
)
from uavgen.tasks import training_input

from conftest import F64, batch_noise, build_model, make_batch, tiny_config, torch_gen

CFG = tiny_config()
DIM = 16


def t_vec(batch, val=0.7):
    return torch.full((batch,), val, dtype=F64)


def make_inputs(kind, *, batch=2, t=0.7, seed0=100, noise_seed=7, cfg=CFG):
    cb = make_batch(kind, cfg, batch=batch)
    nv, na = batch_noise(cb, seed=noise_seed)
    inp, tv, ta = training_input(cb, t_vec(batch, t), nv, na)
    return cb, inp, tv, ta


class TestConstruction:
    def test_same_seed_same_parameters(self):
        a = build_model(CFG, seed=3)
        b = build_model(CFG, seed=3)
        sa, sb = a.state_dict(), b.state_dict()
        assert sa.keys() == sb.keys()
        for k in sa:
            assert torch.equal(sa[k], sb[k]), k

    def test_different_seed_different_parameters(self):
        a = build_model(CFG, seed=3)
        b = build_model(CFG, seed=4)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_depth_mismatch_rejected(self):
        v = BranchConfig("video", depth=2, dim=DIM, heads=2, latent_channels=CFG.channels)
        a = BranchConfig("audio", depth=3, dim=DIM, heads=2, latent_channels=CFG.channels)
        with pytest.raises(ConfigError):
            JointModel(CFG.layout(DIM), v, a, InteractionConfig(heads=2), torch_gen(), F64)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            BranchConfig("video", dim=10, heads=4)

    def test_interaction_parameters_scope(self):
        model = build_model(CFG)
        names = [n for n, _ in model.interaction_parameters()]
        assert names
        assert all(n.startswith(("aligners.", "mask_heads.")) for n in names)


class TestBlocks:
    def test_block_is_identity_at_construction(self):
        block = Block(DIM, heads=2, ff_mult=2.0, gen=torch_gen(5), dtype=F64)
        g = torch_gen(6)
        x = torch.randn(2, 7, DIM, generator=g, dtype=F64)
        text = torch.randn(2, 3, DIM, generator=g, dtype=F64)
        e6 = torch.randn(2, 7, 6, DIM, generator=g, dtype=F64)
        assert torch.equal(block(x, text, e6), x)

    def test_output_head_is_not_neutral(self):
        head = OutputHead(DIM, 5, gen=torch_gen(5), dtype=F64)
        g = torch_gen(6)
        x = torch.randn(2, 7, DIM, generator=g, dtype=F64)
        e = torch.randn(2, 7, DIM, generator=g, dtype=F64)
        out = head(x, e)
        assert out.shape == (2, 7, 5)
        assert not torch.equal(out, head(x, 2.0 * e))

    def test_sinusoidal_embedding_shape_and_range(self):
        t = torch.tensor([0.0, 0.3, 1.0], dtype=F64)
        emb = sinusoidal_embedding(t, 16)
        assert emb.shape == (3, 16)
        assert torch.all(emb.abs() <= 1.0)

    def test_sinusoidal_odd_dim_padded(self):
        emb = sinusoidal_embedding(torch.tensor([0.5], dtype=F64), 7)
        assert emb.shape == (1, 7)
        assert emb[0, -1] == 0.0

    def test_timestep_embedder_distinguishes_levels(self):
        te = TimestepEmbedder(16, DIM, gen=torch_gen(2), dtype=F64)
        t = torch.tensor([[0.1], [0.9]], dtype=F64)
        e = te(t)
        assert e.shape == (2, 1, DIM)
        assert not torch.allclose(e[0], e[1])


class TestNeutrality:
    """With zero-initialized exchange projections the joint forward must
    equal the exchange-silenced forward exactly, for every task."""

    @pytest.mark.parametrize("kind", TASK_KINDS)
    def test_joint_equals_unimodal_at_init(self, kind):
        model = build_model(CFG, live=False)
        _, inp, _, _ = make_inputs(kind)
        joint = model(inp, interaction=True)
        solo = model(inp, interaction=False)
        assert torch.equal(joint.video_field, solo.video_field)
        assert torch.equal(joint.audio_field, solo.audio_field)

    def test_masks_still_produced_while_neutral(self):
        model = build_model(CFG, live=False)
        _, inp, _, _ = make_inputs("JointGen")
        out = model(inp)
        assert len(out.masks) == model.video.cfg.depth
        for m in out.masks:
            assert m.shape == (2, CFG.frames, CFG.video_tokens)
            assert torch.all(m > 0.0) and torch.all(m < 1.0)

    def test_live_model_breaks_neutrality(self):
        model = build_model(CFG, live=True)
        _, inp, _, _ = make_inputs("JointGen")
        joint = model(inp, interaction=True)
        solo = model(inp, interaction=False)
        assert not torch.equal(joint.video_field, solo.video_field)
        assert not torch.equal(joint.audio_field, solo.audio_field)


class TestForward:
    def test_field_shapes_per_task(self):
        model = build_model(CFG, live=True)
        per_v, per_a, C = CFG.video_tokens, CFG.audio_tokens, CFG.channels
        expectations = {
            "JointGen": (CFG.frames * per_v, CFG.frames * per_a),
            "JointGenRefAudio": (CFG.frames * per_v, CFG.frames * per_a),
            "JointContinuation": ((CFG.frames - 1) * per_v, (CFG.frames - 1) * per_a),
            "V2ADubbing": (0, CFG.frames * per_a),
            "A2VSynthesis": (CFG.frames * per_v, 0),
        }
        for kind, (nv, na) in expectations.items():
            _, inp, _, _ = make_inputs(kind)
            out = model(inp)
            assert out.video_field.shape == (2, nv, C), kind
            assert out.audio_field.shape == (2, na, C), kind

    def test_noise_level_conditions_the_field(self):
        # identical latents, different per-token time: the head modulation
        # must produce different fields
        from uavgen.tasks import sampling_input

        model = build_model(CFG, live=False)
        cb = make_batch("JointGen", CFG)
        g = torch_gen(11)
        zv = torch.randn(2, CFG.frames * CFG.video_tokens, CFG.channels, generator=g, dtype=F64)
        za = torch.randn(2, CFG.frames * CFG.audio_tokens, CFG.channels, generator=g, dtype=F64)
        lo = model(sampling_input(cb, zv, za, 0.2))
        hi = model(sampling_input(cb, zv, za, 0.8))
        assert not torch.equal(lo.video_field, hi.video_field)
        assert not torch.equal(lo.audio_field, hi.audio_field)

    def test_batch_rows_are_independent(self):
        model = build_model(CFG, live=True)
        cb = make_batch("JointGen", CFG, batch=3)
        nv, na = batch_noise(cb, seed=9)
        t = torch.tensor([0.15, 0.5, 0.85], dtype=F64)
        inp, _, _ = training_input(cb, t, nv, na)
        out = model(inp)
        for i in range(3):
            cb_i = make_batch("JointGen", CFG, batch=1, seed0=100 + i)
            inp_i, _, _ = training_input(cb_i, t[i : i + 1], nv[i : i + 1], na[i : i + 1])
            out_i = model(inp_i)
            assert torch.allclose(out.video_field[i], out_i.video_field[0], atol=1e-12, rtol=0)
            assert torch.allclose(out.audio_field[i], out_i.audio_field[0], atol=1e-12, rtol=0)

    def test_null_reference_ignores_slot_content(self):
        # JointGen has no audio reference: whatever sits in that slot must
        # never be read
        model = build_model(CFG, live=True)
        _, inp, _, _ = make_inputs("JointGen")
        base = model(inp)
        k = CFG.audio_tokens
        inp.audio_tokens = inp.audio_tokens.clone()
        inp.audio_tokens[:, :k] = 123.0
        poked = model(inp)
        assert torch.equal(base.video_field, poked.video_field)
        assert torch.equal(base.audio_field, poked.audio_field)

    def test_present_reference_is_read(self):
        # reference content reaches generation tokens through branch
        # self-attention, so that path must be live for the probe to matter
        model = build_model(CFG, live=True)
        with torch.no_grad():
            for block in model.audio.blocks:
                block.self_out.weight.normal_(0.0, 0.05, generator=torch_gen(22))
        _, inp, _, _ = make_inputs("JointGenRefAudio")
        base = model(inp)
        k = CFG.audio_tokens
        inp.audio_tokens = inp.audio_tokens.clone()
        inp.audio_tokens[:, :k] += 1.0
        poked = model(inp)
        assert not torch.equal(base.audio_field, poked.audio_field)

    def test_reference_slot_invisible_to_exchange(self):
        # with branch self-attention still silent, the only cross-token
        # routes are the aligners, and those exclude reference slots: poking
        # a present reference changes nothing
        model = build_model(CFG, live=True)
        _, inp, _, _ = make_inputs("JointGenRefAudio")
        base = model(inp)
        k = CFG.audio_tokens
        inp.audio_tokens = inp.audio_tokens.clone()
        inp.audio_tokens[:, :k] += 1.0
        poked = model(inp)
        assert torch.equal(base.audio_field, poked.audio_field)
        assert torch.equal(base.video_field, poked.video_field)

    def test_text_is_silent_until_projections_move(self):
        # text cross-attention output projections start at zero, so swapping
        # the style id changes nothing at construction
        model = build_model(CFG, live=True)
        _, inp, _, _ = make_inputs("JointGen")
        base = model(inp)
        inp.video_text = (inp.video_text + 1) % CFG.video_vocab
        assert torch.equal(model(inp).video_field, base.video_field)

        with torch.no_grad():
            for block in model.video.blocks:
                block.text_out.weight.normal_(0.0, 0.05, generator=torch_gen(21))
        after = model(inp)
        inp.video_text = (inp.video_text + 1) % CFG.video_vocab
        assert not torch.equal(model(inp).video_field, after.video_field)

    def test_differing_branch_widths(self):
        model = build_model(CFG, audio_dim=12, live=True)
        _, inp, tv, ta = make_inputs("JointGen")
        out = model(inp)
        loss = velocity_loss(out.video_field, tv) + velocity_loss(out.audio_field, ta)
        loss.backward()
        assert torch.isfinite(loss)
        assert model.audio.in_proj.weight.grad is not None


class TestExchangeWiring:
    def test_non_sink_positions_bitwise_preserved(self):
        model = build_model(CFG, live=True)
        cb, inp, _, _ = make_inputs("JointContinuation")
        cap = []
        model(inp, capture=cap)
        assert [c["layer"] for c in cap] == list(range(model.video.cfg.depth))
        cut_v = (1 + cb.video_cond_frames) * CFG.video_tokens
        cut_a = (1 + cb.audio_cond_frames) * CFG.audio_tokens
        for c in cap:
            assert torch.equal(c["video"][:, :cut_v], c["video_before"][:, :cut_v])
            assert torch.equal(c["audio"][:, :cut_a], c["audio_before"][:, :cut_a])
            assert not torch.equal(c["video"][:, cut_v:], c["video_before"][:, cut_v:])
            assert not torch.equal(c["audio"][:, cut_a:], c["audio_before"][:, cut_a:])

    def test_source_only_video_never_updated(self):
        model = build_model(CFG, live=True)
        _, inp, _, _ = make_inputs("V2ADubbing")
        cap = []
        out = model(inp, capture=cap)
        for c in cap:
            assert torch.equal(c["video"], c["video_before"])
            assert not torch.equal(c["audio"], c["audio_before"])
        assert out.video_field.shape[1] == 0

    def test_source_only_audio_never_updated(self):
        model = build_model(CFG, live=True)
        _, inp, _, _ = make_inputs("A2VSynthesis")
        cap = []
        out = model(inp, capture=cap)
        for c in cap:
            assert torch.equal(c["audio"], c["audio_before"])
            assert not torch.equal(c["video"], c["video_before"])
        assert out.audio_field.shape[1] == 0

    def test_layer_subset(self):
        icfg = InteractionConfig(heads=2, layers=(1,))
        model = build_model(CFG, interaction=icfg, live=True)
        _, inp, _, _ = make_inputs("JointGen")
        cap = []
        out = model(inp, capture=cap)
        assert [c["layer"] for c in cap] == [1]
        assert len(out.masks) == 1

    def test_no_interaction_layers(self):
        icfg = InteractionConfig(heads=2, layers="none")
        model = build_model(CFG, interaction=icfg)
        _, inp, _, _ = make_inputs("JointGen")
        out = model(inp)
        assert out.masks == []

    def test_mask_override_ones_equals_ungated_model(self):
        # gated and ungated models draw identical branch/aligner parameters
        # (mask heads are constructed last), so forcing the gate to one must
        # reproduce the ungated forward bit for bit
        gated = build_model(CFG, seed=5, live=True)
        ungated = build_model(
            CFG, seed=5, live=True, interaction=InteractionConfig(heads=2, mask_gating=False)
        )
        for (na, pa), (nb, pb) in zip(
            (i for i in gated.named_parameters() if not i[0].startswith("mask_heads.")),
            ungated.named_parameters(),
        ):
            assert na == nb and torch.equal(pa, pb), na

        _, inp, _, _ = make_inputs("JointGen")
        ones = torch.ones(2, CFG.frames, CFG.video_tokens, dtype=F64)
        a = gated(inp, mask_override=ones)
        b = ungated(inp)
        assert torch.equal(a.video_field, b.video_field)
        assert torch.equal(a.audio_field, b.audio_field)

    def test_mask_override_changes_live_forward(self):
        model = build_model(CFG, live=True)
        _, inp, _, _ = make_inputs("JointGen")
        base = model(inp)
        half = torch.full((2, CFG.frames, CFG.video_tokens), 0.5, dtype=F64)
        forced = model(inp, mask_override=half)
        assert not torch.equal(base.video_field, forced.video_field)


class TestGradients:
    def test_unimodal_loss_reaches_no_cross_branch_parameters(self):
        model = build_model(CFG, live=True)
        _, inp, tv, _ = make_inputs("JointGen")
        out = model(inp, interaction=False)
        velocity_loss(out.video_field, tv).backward()
        assert all(p.grad is None for p in model.audio.parameters())
        assert model.video.in_proj.weight.grad is not None
        assert model.video.in_proj.weight.grad.abs().sum() > 0

    def test_joint_loss_reaches_other_branch_through_exchange(self):
        model = build_model(CFG, live=True)
        _, inp, tv, _ = make_inputs("JointGen")
        out = model(inp, interaction=True)
        velocity_loss(out.video_field, tv).backward()
        g = model.audio.in_proj.weight.grad
        assert g is not None and g.abs().sum() > 0


class TestInputValidation:
    def _good(self):
        _, inp, _, _ = make_inputs("JointGen")
        return inp

    def test_wrong_video_length(self):
        model = build_model(CFG)
        inp = self._good()
        inp.video_tokens = inp.video_tokens[:, :-1]
        with pytest.raises(ShapeError):
            model(inp)

    def test_wrong_channel_count(self):
        model = build_model(CFG)
        inp = self._good()
        inp.audio_tokens = torch.cat([inp.audio_tokens, inp.audio_tokens[..., :1]], dim=-1)
        with pytest.raises(ShapeError):
            model(inp)

    def test_cond_prefix_out_of_range(self):
        model = build_model(CFG)
        inp = self._good()
        inp.video_cond_frames = CFG.frames + 1
        with pytest.raises(ShapeError):
            model(inp)

    def test_empty_generation_flagged_present(self):
        model = build_model(CFG)
        inp = self._good()
        inp.video_cond_frames = CFG.frames
        with pytest.raises(ShapeError):
            model(inp)

    def test_nothing_to_denoise(self):
        model = build_model(CFG)
        inp = self._good()
        inp.video_has_gen = False
        inp.audio_has_gen = False
        with pytest.raises(ShapeError):
            model(inp)
