"""Binary tensor and dataset-shard files.

Single tensor: magic "UAVT" | dtype code u32 | rank u64 | dims u64 each |
raw row-major little-endian data. Dtype codes: 0 = f32, 1 = f64, 2 = i64.
Everything is fixed little-endian so files byte-compare across machines.

Shard: magic "UAVS" | version u32 | generator-config text (u64 length +
utf-8) | sample count u64 | eight tensor records (seeds, styles, region
starts, symbols, traces, masks, video, audio). A shard is regenerable from
its embedded config and seed list; storing the arrays keeps byte-exact
fixtures independent of the generator's future.
"""

from __future__ import annotations

import dataclasses
import struct
from typing import BinaryIO, List, Sequence, Tuple

import numpy as np
import torch

from .data import DataConfig, SyntheticSample, generate_sample
from .errors import FormatError

TENSOR_MAGIC = b"UAVT"
SHARD_MAGIC = b"UAVS"
SHARD_VERSION = 1

_CODE_OF_DTYPE = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_NP_OF_CODE = {0: "<f4", 1: "<f8", 2: "<i8"}
_TORCH_OF_CODE = {0: torch.float32, 1: torch.float64, 2: torch.int64}

_MAX_ELEMENTS = 1 << 34  # refuse absurd headers before allocating


def _read_exact(fh: BinaryIO, n: int, what: str) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file: wanted {n} bytes of {what}, got {len(buf)}")
    return buf


def write_tensor_into(fh: BinaryIO, tensor: torch.Tensor) -> None:
    t = torch.as_tensor(tensor)
    if t.dtype not in _CODE_OF_DTYPE:
        raise FormatError(f"unsupported dtype {t.dtype}; store f32, f64 or i64")
    code = _CODE_OF_DTYPE[t.dtype]
    arr = t.detach().cpu().contiguous().numpy()
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<I", code))
    fh.write(struct.pack("<Q", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
    fh.write(arr.astype(_NP_OF_CODE[code], copy=False).tobytes())


def read_tensor_from(fh: BinaryIO) -> torch.Tensor:
    magic = _read_exact(fh, 4, "tensor magic")
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    (code,) = struct.unpack("<I", _read_exact(fh, 4, "dtype code"))
    if code not in _NP_OF_CODE:
        raise FormatError(f"unknown dtype code {code}")
    (rank,) = struct.unpack("<Q", _read_exact(fh, 8, "rank"))
    if rank > 16:
        raise FormatError(f"implausible rank {rank}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank, "dims")) if rank else ()
    n = 1
    for d in shape:
        n *= d
    if n > _MAX_ELEMENTS:
        raise FormatError(f"implausible element count {n}")
    itemsize = np.dtype(_NP_OF_CODE[code]).itemsize
    raw = _read_exact(fh, n * itemsize, "tensor data")
    arr = np.frombuffer(raw, dtype=_NP_OF_CODE[code]).reshape(shape)
    return torch.from_numpy(arr.copy()).to(_TORCH_OF_CODE[code])


def write_tensor(path, tensor: torch.Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor_into(fh, tensor)


def read_tensor(path) -> torch.Tensor:
    with open(path, "rb") as fh:
        out = read_tensor_from(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after tensor record")
    return out


# -- dataset shards -----------------------------------------------------------


def _config_text(cfg: DataConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        rendered = repr(float(v)) if isinstance(v, float) else str(int(v))
        lines.append(f"data.{f.name} = {rendered}")
    return "\n".join(lines) + "\n"


def _parse_config_text(text: str) -> DataConfig:
    # shard headers hold only data.* keys; reuse the config reader
    from .config import parse_config

    return parse_config(text).data_config()


def write_shard(path, cfg: DataConfig, seeds: Sequence[int]) -> None:
    """Generate one sample per seed and serialize the batch with its config."""
    if not seeds:
        raise FormatError("shard needs at least one seed")
    samples = [generate_sample(cfg, int(s)) for s in seeds]
    text = _config_text(cfg).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(SHARD_MAGIC)
        fh.write(struct.pack("<I", SHARD_VERSION))
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(struct.pack("<Q", len(samples)))
        write_tensor_into(fh, torch.tensor([int(s) for s in seeds], dtype=torch.int64))
        write_tensor_into(fh, torch.tensor([s.style for s in samples], dtype=torch.int64))
        write_tensor_into(fh, torch.tensor([s.region_start for s in samples], dtype=torch.int64))
        write_tensor_into(fh, torch.from_numpy(np.stack([s.symbols for s in samples])))
        write_tensor_into(fh, torch.from_numpy(np.stack([s.trace for s in samples])))
        write_tensor_into(fh, torch.from_numpy(np.stack([s.gt_mask for s in samples])))
        write_tensor_into(fh, torch.from_numpy(np.stack([s.video for s in samples])))
        write_tensor_into(fh, torch.from_numpy(np.stack([s.audio for s in samples])))


def read_shard(path) -> Tuple[DataConfig, List[int], List[SyntheticSample]]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "shard magic")
        if magic != SHARD_MAGIC:
            raise FormatError(f"bad shard magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != SHARD_VERSION:
            raise FormatError(f"unsupported shard version {version}")
        (text_len,) = struct.unpack("<Q", _read_exact(fh, 8, "config length"))
        if text_len > (1 << 20):
            raise FormatError(f"implausible config length {text_len}")
        cfg = _parse_config_text(_read_exact(fh, text_len, "config text").decode("utf-8"))
        (count,) = struct.unpack("<Q", _read_exact(fh, 8, "sample count"))
        seeds = read_tensor_from(fh)
        styles = read_tensor_from(fh)
        starts = read_tensor_from(fh)
        symbols = read_tensor_from(fh)
        traces = read_tensor_from(fh)
        masks = read_tensor_from(fh)
        video = read_tensor_from(fh)
        audio = read_tensor_from(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after shard records")
    for name, t in (("seeds", seeds), ("video", video), ("audio", audio)):
        if t.shape[0] != count:
            raise FormatError(f"shard {name} rows {t.shape[0]} != count {count}")
    samples = [
        SyntheticSample(
            video=video[i].numpy(),
            audio=audio[i].numpy(),
            style=int(styles[i]),
            symbols=symbols[i].numpy(),
            region_start=int(starts[i]),
            gt_mask=masks[i].numpy(),
            trace=traces[i].numpy(),
        )
        for i in range(count)
    ]
    return cfg, [int(s) for s in seeds], samples
