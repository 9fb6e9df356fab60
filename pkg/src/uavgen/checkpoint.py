"""Training checkpoints: config echo, step counter, parameters, optimizer state.

Layout: magic "UAVG" | format version u32 | config text (u64 length + utf-8)
| step u64 | parameter count u32 | per parameter a name (u16 length + utf-8)
and a tensor record | optimizer entry count u32 | per entry the same name +
tensor framing, names being "<param index>.<state key>" (e.g. "3.exp_avg").

Tensors keep their training dtype on disk, so load(save(model)) restores
every parameter bit-for-bit in both f32 and f64 runs. Optimizer param groups
are not stored; they are rebuilt from the config echo on resume, and only
the per-parameter moment tensors travel in the file.
"""

from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass
from typing import BinaryIO, Dict

import torch

from .errors import ConfigError, FormatError
from .tensorio import _read_exact, read_tensor_from, write_tensor_into

CHECKPOINT_MAGIC = b"UAVG"
CHECKPOINT_VERSION = 1


@dataclass
class CheckpointData:
    config_text: str
    step: int
    params: "OrderedDict[str, torch.Tensor]"
    opt_state: "OrderedDict[str, torch.Tensor]"


def _write_name(fh: BinaryIO, name: str) -> None:
    raw = name.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"name too long: {name[:40]}...")
    fh.write(struct.pack("<H", len(raw)))
    fh.write(raw)


def _read_name(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
    return _read_exact(fh, n, "name").decode("utf-8")


def _optimizer_entries(optimizer: torch.optim.Optimizer) -> "OrderedDict[str, torch.Tensor]":
    entries: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    state = optimizer.state_dict()["state"]
    for idx in sorted(state):
        for key, val in sorted(state[idx].items()):
            entries[f"{idx}.{key}"] = torch.as_tensor(val)
    return entries


def save_checkpoint(path, model: torch.nn.Module, optimizer, step: int, config_text: str) -> None:
    opt_entries = _optimizer_entries(optimizer) if optimizer is not None else OrderedDict()
    params = list(model.named_parameters())
    text = config_text.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<Q", len(text)))
        fh.write(text)
        fh.write(struct.pack("<Q", int(step)))
        fh.write(struct.pack("<I", len(params)))
        for name, p in params:
            _write_name(fh, name)
            write_tensor_into(fh, p.detach())
        fh.write(struct.pack("<I", len(opt_entries)))
        for name, t in opt_entries.items():
            _write_name(fh, name)
            write_tensor_into(fh, t)


def read_checkpoint(path) -> CheckpointData:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "checkpoint magic")
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad checkpoint magic {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        (text_len,) = struct.unpack("<Q", _read_exact(fh, 8, "config length"))
        if text_len > (1 << 20):
            raise FormatError(f"implausible config length {text_len}")
        config_text = _read_exact(fh, text_len, "config text").decode("utf-8")
        (step,) = struct.unpack("<Q", _read_exact(fh, 8, "step"))
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for _ in range(n_params):
            name = _read_name(fh)
            params[name] = read_tensor_from(fh)
        (n_opt,) = struct.unpack("<I", _read_exact(fh, 4, "optimizer entry count"))
        opt_state: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        for _ in range(n_opt):
            name = _read_name(fh)
            opt_state[name] = read_tensor_from(fh)
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after checkpoint records")
    return CheckpointData(config_text=config_text, step=step, params=params, opt_state=opt_state)


def load_model_state(model: torch.nn.Module, ckpt: CheckpointData) -> None:
    """Copy stored parameters into the model; any mismatch is a hard error."""
    own = OrderedDict(model.named_parameters())
    missing = [n for n in own if n not in ckpt.params]
    extra = [n for n in ckpt.params if n not in own]
    if missing or extra:
        raise ConfigError(
            f"checkpoint/model parameter sets differ: missing {missing[:3]}, extra {extra[:3]}"
        )
    with torch.no_grad():
        for name, p in own.items():
            t = ckpt.params[name]
            if tuple(t.shape) != tuple(p.shape):
                raise ConfigError(
                    f"resume shape mismatch for {name}: "
                    f"checkpoint {tuple(t.shape)} vs model {tuple(p.shape)}"
                )
            if t.dtype != p.dtype:
                raise ConfigError(
                    f"resume dtype mismatch for {name}: checkpoint {t.dtype} vs model {p.dtype}"
                )
            p.copy_(t)


def load_optimizer_state(optimizer: torch.optim.Optimizer, ckpt: CheckpointData) -> None:
    """Rebuild AdamW moments; param groups come from the freshly built optimizer."""
    nested: Dict[int, Dict[str, torch.Tensor]] = {}
    for name, t in ckpt.opt_state.items():
        idx_str, _, key = name.partition(".")
        if not idx_str.isdigit() or not key:
            raise FormatError(f"malformed optimizer entry name {name!r}")
        nested.setdefault(int(idx_str), {})[key] = t
    groups = optimizer.state_dict()["param_groups"]
    n_params = sum(len(g["params"]) for g in groups)
    if nested and max(nested) >= n_params:
        raise ConfigError(
            f"optimizer entry index {max(nested)} out of range for {n_params} parameters"
        )
    optimizer.load_state_dict({"state": nested, "param_groups": groups})
