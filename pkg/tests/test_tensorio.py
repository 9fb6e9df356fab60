import struct

import numpy as np
import pytest
import torch

from uavgen.data import DataConfig, generate_sample
from uavgen.errors import FormatError
from uavgen.tensorio import (
    SHARD_MAGIC,
    TENSOR_MAGIC,
    read_shard,
    read_tensor,
    write_shard,
    write_tensor,
)


def bits(t: torch.Tensor) -> np.ndarray:
    """Reinterpret the payload as integers so -0.0 and NaN payloads count."""
    a = t.numpy()
    return a.view({4: np.int32, 8: np.int64}[a.dtype.itemsize])


class TestTensorRoundtrip:
    @pytest.mark.parametrize("dtype", [torch.float32, torch.float64, torch.int64])
    def test_bitwise_roundtrip(self, tmp_path, dtype):
        gen = torch.Generator().manual_seed(3)
        if dtype is torch.int64:
            t = torch.randint(-(2**62), 2**62, (3, 4, 5), generator=gen)
        else:
            t = torch.randn(3, 4, 5, generator=gen, dtype=dtype)
        path = tmp_path / "t.uavt"
        write_tensor(path, t)
        back = read_tensor(path)
        assert back.dtype == dtype and back.shape == t.shape
        assert np.array_equal(bits(back), bits(t))

    def test_special_values_roundtrip(self, tmp_path):
        t = torch.tensor([0.0, -0.0, float("inf"), float("-inf"), float("nan"), 1e-310])
        path = tmp_path / "s.uavt"
        write_tensor(path, t)
        assert np.array_equal(bits(read_tensor(path)), bits(t))

    def test_scalar_and_empty(self, tmp_path):
        for name, t in (("scalar", torch.tensor(2.5)), ("empty", torch.zeros(0, 3))):
            path = tmp_path / f"{name}.uavt"
            write_tensor(path, t)
            back = read_tensor(path)
            assert back.shape == t.shape and torch.equal(back, t)

    def test_noncontiguous_input(self, tmp_path):
        t = torch.arange(12.0).reshape(3, 4).T
        assert not t.is_contiguous()
        path = tmp_path / "nc.uavt"
        write_tensor(path, t)
        assert torch.equal(read_tensor(path), t)

    def test_exact_header_bytes(self, tmp_path):
        """The on-disk layout is a contract, not an implementation detail."""
        t = torch.tensor([[1.0, -2.0]], dtype=torch.float32)
        path = tmp_path / "h.uavt"
        write_tensor(path, t)
        expected = (
            TENSOR_MAGIC
            + struct.pack("<I", 0)       # f32
            + struct.pack("<Q", 2)       # rank
            + struct.pack("<QQ", 1, 2)   # dims
            + np.array([1.0, -2.0], dtype="<f4").tobytes()
        )
        assert path.read_bytes() == expected

    def test_dtype_codes(self, tmp_path):
        for code, t in ((0, torch.zeros(1)), (1, torch.zeros(1, dtype=torch.float64)),
                        (2, torch.zeros(1, dtype=torch.int64))):
            path = tmp_path / f"c{code}.uavt"
            write_tensor(path, t)
            assert struct.unpack("<I", path.read_bytes()[4:8])[0] == code


class TestTensorErrors:
    def test_unsupported_dtype(self, tmp_path):
        for bad in (torch.zeros(2, dtype=torch.float16), torch.zeros(2, dtype=torch.bool)):
            with pytest.raises(FormatError, match="unsupported dtype"):
                write_tensor(tmp_path / "bad.uavt", bad)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.uavt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(FormatError, match="bad tensor magic"):
            read_tensor(path)

    def test_unknown_dtype_code(self, tmp_path):
        path = tmp_path / "bad.uavt"
        path.write_bytes(TENSOR_MAGIC + struct.pack("<I", 9) + struct.pack("<Q", 0))
        with pytest.raises(FormatError, match="unknown dtype code"):
            read_tensor(path)

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "t.uavt"
        write_tensor(path, torch.zeros(10))
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(FormatError, match="truncated"):
            read_tensor(path)

    def test_trailing_bytes(self, tmp_path):
        path = tmp_path / "t.uavt"
        write_tensor(path, torch.zeros(2))
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            read_tensor(path)

    def test_implausible_rank(self, tmp_path):
        path = tmp_path / "r.uavt"
        path.write_bytes(TENSOR_MAGIC + struct.pack("<I", 0) + struct.pack("<Q", 99))
        with pytest.raises(FormatError, match="implausible rank"):
            read_tensor(path)

    def test_implausible_element_count(self, tmp_path):
        path = tmp_path / "n.uavt"
        path.write_bytes(
            TENSOR_MAGIC + struct.pack("<I", 0) + struct.pack("<Q", 2)
            + struct.pack("<QQ", 1 << 40, 1 << 40)
        )
        with pytest.raises(FormatError, match="implausible element count"):
            read_tensor(path)


def small_cfg() -> DataConfig:
    return DataConfig(frames=4, video_tokens=4, audio_tokens=3, channels=5,
                      video_vocab=5, audio_vocab=7, region_tokens=2,
                      trace_scale=2.5, noise=0.2)


class TestShards:
    def test_roundtrip_matches_regeneration(self, tmp_path):
        cfg = small_cfg()
        seeds = [11, 42, 300]
        path = tmp_path / "d.uavs"
        write_shard(path, cfg, seeds)
        cfg2, seeds2, samples = read_shard(path)
        assert cfg2 == cfg
        assert seeds2 == seeds
        assert len(samples) == 3
        for seed, got in zip(seeds, samples):
            want = generate_sample(cfg, seed)
            assert np.array_equal(got.video, want.video)
            assert np.array_equal(got.audio, want.audio)
            assert np.array_equal(got.gt_mask, want.gt_mask)
            assert np.array_equal(got.symbols, want.symbols)
            assert np.array_equal(got.trace, want.trace)
            assert got.style == want.style
            assert got.region_start == want.region_start

    def test_header_magic(self, tmp_path):
        path = tmp_path / "d.uavs"
        write_shard(path, small_cfg(), [1])
        assert path.read_bytes()[:4] == SHARD_MAGIC

    def test_nondefault_config_floats_survive(self, tmp_path):
        cfg = DataConfig(frames=5, video_tokens=4, audio_tokens=2, channels=6,
                         video_vocab=4, audio_vocab=5, region_tokens=3,
                         trace_scale=1.0000000000000002, noise=0.07,
                         style_amp=0.25, decoy_amp=3.5, cond_fraction=0.4)
        path = tmp_path / "d.uavs"
        write_shard(path, cfg, [5])
        cfg2, _, _ = read_shard(path)
        assert cfg2 == cfg

    def test_deterministic_bytes(self, tmp_path):
        a, b = tmp_path / "a.uavs", tmp_path / "b.uavs"
        write_shard(a, small_cfg(), [1, 2])
        write_shard(b, small_cfg(), [1, 2])
        assert a.read_bytes() == b.read_bytes()

    def test_empty_seed_list_rejected(self, tmp_path):
        with pytest.raises(FormatError, match="at least one seed"):
            write_shard(tmp_path / "d.uavs", small_cfg(), [])

    def test_shard_magic_mismatch(self, tmp_path):
        path = tmp_path / "t.uavt"
        write_tensor(path, torch.zeros(2))
        with pytest.raises(FormatError, match="bad shard magic"):
            read_shard(path)

    def test_tensor_reader_rejects_shard(self, tmp_path):
        path = tmp_path / "d.uavs"
        write_shard(path, small_cfg(), [1])
        with pytest.raises(FormatError, match="bad tensor magic"):
            read_tensor(path)

    def test_truncated_shard(self, tmp_path):
        path = tmp_path / "d.uavs"
        write_shard(path, small_cfg(), [1, 2])
        path.write_bytes(path.read_bytes()[:-100])
        with pytest.raises(FormatError, match="truncated"):
            read_shard(path)
