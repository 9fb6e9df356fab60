"""Run configuration: typed sections serialized as line-oriented key=value text.

The on-disk format is deliberately dumb: one `section.key = value` per line,
`#` comments, blank lines ignored. Unknown keys and duplicate keys are hard
errors so a typo cannot silently fall back to a default. parse -> print ->
parse is a fixpoint (floats are emitted with repr, which round-trips).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Tuple, Union

import torch

from .data import DataConfig
from .errors import ConfigError
from .interaction import TOPOLOGIES, InteractionConfig
from .model import BranchConfig, JointModel
from .numerics import resolve_dtype
from .sampling import GuidanceScales

MASK_MODES = ("decay", "fixed", "zero")
TIME_SAMPLING = ("uniform", "logit_normal")
PRECISIONS = ("f32", "f64")

LayerSpec = Union[str, Tuple[int, ...]]


@dataclass
class ModelSection:
    depth: int = 4
    dim: int = 64
    audio_dim: int = 0  # 0: audio branch shares the video width
    heads: int = 4
    ff_mult: float = 4.0


@dataclass
class InteractionSection:
    a2v: str = "windowed"
    v2a: str = "windowed"
    window: int = 1
    heads: int = 4
    layers: LayerSpec = "all"
    mask_gating: bool = True


@dataclass
class DataSection:
    frames: int = 8
    video_tokens: int = 16
    audio_tokens: int = 4
    channels: int = 6
    video_vocab: int = 8
    audio_vocab: int = 12
    region_tokens: int = 4
    trace_scale: float = 0.8
    noise: float = 0.3
    style_amp: float = 1.0
    decoy_amp: float = 2.0
    cond_fraction: float = 0.25


@dataclass
class ScheduleSection:
    stage1_steps: int = 200
    stage2_steps: int = 900
    stage3_steps: int = 900
    lr: float = 2e-3
    batch: int = 8
    weight_decay: float = 0.01
    mask_weight: float = 0.1
    mask_mode: str = "decay"
    time_sampling: str = "uniform"
    checkpoint_every: int = 500
    probe_every: int = 250
    probe_samples: int = 8
    probe_steps: int = 8


@dataclass
class TasksSection:
    ratios: Tuple[float, ...] = (4.0, 1.0, 1.0, 2.0, 2.0)


@dataclass
class SamplerSection:
    steps: int = 50
    scale_video: float = 2.0
    scale_audio: float = 2.0


@dataclass
class RunSection:
    seed: int = 0
    precision: str = "f32"
    out_dir: str = "runs/default"
    threads: int = 1


@dataclass
class RunConfig:
    model: ModelSection = field(default_factory=ModelSection)
    interaction: InteractionSection = field(default_factory=InteractionSection)
    data: DataSection = field(default_factory=DataSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    tasks: TasksSection = field(default_factory=TasksSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    run: RunSection = field(default_factory=RunSection)

    # -- derived builders ---------------------------------------------------

    def data_config(self) -> DataConfig:
        d = self.data
        return DataConfig(
            frames=d.frames,
            video_tokens=d.video_tokens,
            audio_tokens=d.audio_tokens,
            channels=d.channels,
            video_vocab=d.video_vocab,
            audio_vocab=d.audio_vocab,
            region_tokens=d.region_tokens,
            trace_scale=d.trace_scale,
            noise=d.noise,
            style_amp=d.style_amp,
            decoy_amp=d.decoy_amp,
            cond_fraction=d.cond_fraction,
        )

    def interaction_config(self) -> InteractionConfig:
        i = self.interaction
        return InteractionConfig(
            a2v=i.a2v,
            v2a=i.v2a,
            window=i.window,
            heads=i.heads,
            layers=i.layers,
            mask_gating=i.mask_gating,
        )

    def branch_config(self, modality: str) -> BranchConfig:
        m, d = self.model, self.data
        if modality == "video":
            dim, vocab, text_len = m.dim, d.video_vocab, 1
        elif modality == "audio":
            dim = m.audio_dim or m.dim
            vocab, text_len = d.audio_vocab, d.frames
        else:
            raise ConfigError(f"unknown modality {modality!r}")
        return BranchConfig(
            modality=modality,
            depth=m.depth,
            dim=dim,
            heads=m.heads,
            ff_mult=m.ff_mult,
            latent_channels=d.channels,
            text_vocab=vocab,
            text_len=text_len,
            freq_dim=dim,
        )

    def torch_dtype(self) -> torch.dtype:
        return resolve_dtype(self.run.precision)

    def build_model(self, gen: torch.Generator) -> JointModel:
        return JointModel(
            self.data_config().layout(self.model.dim),
            self.branch_config("video"),
            self.branch_config("audio"),
            self.interaction_config(),
            gen=gen,
            dtype=self.torch_dtype(),
        )

    def total_steps(self) -> int:
        s = self.schedule
        return s.stage1_steps + s.stage2_steps + s.stage3_steps

    def joint_steps(self) -> int:
        s = self.schedule
        return s.stage2_steps + s.stage3_steps

    def guidance(self) -> GuidanceScales:
        return GuidanceScales(video=self.sampler.scale_video, audio=self.sampler.scale_audio)


# -- schema -------------------------------------------------------------------
#
# kind tags drive both parsing and printing. "choice:<name>" validates against
# the named tuple above.

_CHOICES = {
    "topology": TOPOLOGIES,
    "mask_mode": MASK_MODES,
    "time_sampling": TIME_SAMPLING,
    "precision": PRECISIONS,
}

_SCHEMA = (
    ("model.depth", "int"),
    ("model.dim", "int"),
    ("model.audio_dim", "int"),
    ("model.heads", "int"),
    ("model.ff_mult", "float"),
    ("interaction.a2v", "choice:topology"),
    ("interaction.v2a", "choice:topology"),
    ("interaction.window", "int"),
    ("interaction.heads", "int"),
    ("interaction.layers", "layers"),
    ("interaction.mask_gating", "bool"),
    ("data.frames", "int"),
    ("data.video_tokens", "int"),
    ("data.audio_tokens", "int"),
    ("data.channels", "int"),
    ("data.video_vocab", "int"),
    ("data.audio_vocab", "int"),
    ("data.region_tokens", "int"),
    ("data.trace_scale", "float"),
    ("data.noise", "float"),
    ("data.style_amp", "float"),
    ("data.decoy_amp", "float"),
    ("data.cond_fraction", "float"),
    ("schedule.stage1_steps", "int"),
    ("schedule.stage2_steps", "int"),
    ("schedule.stage3_steps", "int"),
    ("schedule.lr", "float"),
    ("schedule.batch", "int"),
    ("schedule.weight_decay", "float"),
    ("schedule.mask_weight", "float"),
    ("schedule.mask_mode", "choice:mask_mode"),
    ("schedule.time_sampling", "choice:time_sampling"),
    ("schedule.checkpoint_every", "int"),
    ("schedule.probe_every", "int"),
    ("schedule.probe_samples", "int"),
    ("schedule.probe_steps", "int"),
    ("tasks.ratios", "floats"),
    ("sampler.steps", "int"),
    ("sampler.scale_video", "float"),
    ("sampler.scale_audio", "float"),
    ("run.seed", "int"),
    ("run.precision", "choice:precision"),
    ("run.out_dir", "str"),
    ("run.threads", "int"),
)

_KINDS = dict(_SCHEMA)


def _parse_value(key: str, kind: str, text: str):
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text in ("true", "false"):
                return text == "true"
            raise ValueError(text)
        if kind == "str":
            return text
        if kind == "floats":
            return tuple(float(p) for p in text.split(","))
        if kind == "layers":
            if text in ("all", "none"):
                return text
            return tuple(int(p) for p in text.split(","))
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind}") from exc
    if kind.startswith("choice:"):
        allowed = _CHOICES[kind.split(":", 1)[1]]
        if text not in allowed:
            raise ConfigError(f"{key}: {text!r} not one of {allowed}")
        return text
    raise ConfigError(f"{key}: unhandled kind {kind!r}")


def _format_value(kind: str, value) -> str:
    if kind == "bool":
        return "true" if value else "false"
    if kind == "float":
        return repr(float(value))
    if kind == "floats":
        return ",".join(repr(float(v)) for v in value)
    if kind == "layers":
        if isinstance(value, str):
            return value
        return ",".join(str(int(v)) for v in value)
    return str(value)


def _set_key(cfg: RunConfig, key: str, value) -> None:
    section, name = key.split(".", 1)
    setattr(getattr(cfg, section), name, value)


def _get_key(cfg: RunConfig, key: str):
    section, name = key.split(".", 1)
    return getattr(getattr(cfg, section), name)


def _validate(cfg: RunConfig) -> None:
    m, i, s, r = cfg.model, cfg.interaction, cfg.schedule, cfg.run
    if m.depth < 1 or m.dim < 1 or m.heads < 1:
        raise ConfigError("model.depth/dim/heads must be positive")
    if m.dim % m.heads or (m.audio_dim and m.audio_dim % m.heads):
        raise ConfigError("branch widths must be divisible by model.heads")
    if i.window < 0:
        raise ConfigError("interaction.window must be >= 0")
    if isinstance(i.layers, tuple):
        if any(not 0 <= j < m.depth for j in i.layers):
            raise ConfigError(
                f"interaction.layers {i.layers} out of range for depth {m.depth}"
            )
        if len(set(i.layers)) != len(i.layers):
            raise ConfigError("interaction.layers has duplicates")
    if min(s.stage1_steps, s.stage2_steps, s.stage3_steps) < 0:
        raise ConfigError("stage step counts must be >= 0")
    if s.batch < 1:
        raise ConfigError("schedule.batch must be >= 1")
    if s.lr <= 0:
        raise ConfigError("schedule.lr must be positive")
    if s.weight_decay < 0 or s.mask_weight < 0:
        raise ConfigError("schedule.weight_decay/mask_weight must be >= 0")
    if s.checkpoint_every < 1 or s.probe_every < 1:
        raise ConfigError("schedule.checkpoint_every/probe_every must be >= 1")
    if s.probe_samples < 1 or s.probe_steps < 1:
        raise ConfigError("schedule.probe_samples/probe_steps must be >= 1")
    if len(cfg.tasks.ratios) != 5:
        raise ConfigError(f"tasks.ratios needs 5 entries, got {len(cfg.tasks.ratios)}")
    if min(cfg.tasks.ratios) < 0 or sum(cfg.tasks.ratios) <= 0:
        raise ConfigError("tasks.ratios must be non-negative with positive sum")
    if cfg.sampler.steps < 1:
        raise ConfigError("sampler.steps must be >= 1")
    if cfg.sampler.scale_video < 0 or cfg.sampler.scale_audio < 0:
        raise ConfigError("guidance scales must be >= 0")
    if r.threads < 1:
        raise ConfigError("run.threads must be >= 1")
    # surface geometry errors (frame counts, vocab sizes, region fit) now
    cfg.data_config()


def parse_config(text: str) -> RunConfig:
    """Parse key=value text into a validated RunConfig."""
    cfg = RunConfig()
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in _KINDS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        seen.add(key)
        _set_key(cfg, key, _parse_value(key, _KINDS[key], value))
    _validate(cfg)
    return cfg


def print_config(cfg: RunConfig) -> str:
    """Render every key in schema order; parse(print_config(cfg)) == cfg."""
    lines = []
    current = None
    for key, kind in _SCHEMA:
        section = key.split(".", 1)[0]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"# {section}")
            current = section
        lines.append(f"{key} = {_format_value(kind, _get_key(cfg, key))}")
    return "\n".join(lines) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(cfg: RunConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(print_config(cfg))
