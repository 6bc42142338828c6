"""Run configuration and its flat dotted-key YAML file format.

Every field of :class:`RunConfig` maps to one ``section.key: value`` line, so
configs can be diffed, overridden from the command line and echoed verbatim
into checkpoint manifests.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from ..align_loss import PlacementConfig
from ..encoders import EncoderConfig
from ..fusion import TokenMiningConfig
from ..lm import LmConfig
from ..synthdata import SpecRanges

STAGES = ("align", "vlm-stage1", "vlm-stage2")


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class DataConfig:
    path: str = "data/synth"
    count: int = 640
    seed: int = 1234
    train_ratio: float = 0.8
    ranges: SpecRanges = field(default_factory=SpecRanges)


@dataclass
class VlmConfig:
    keyframes: int = 2
    align_checkpoint: str = ""
    init_checkpoint: str = ""
    max_new_tokens: int = 4


@dataclass
class RunConfig:
    experiment: str = "hilight"
    stage: str = "align"
    seed: int = 0
    epochs: int = 30
    batch_size: int = 32
    output_dir: str = "runs/default"
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    placement: PlacementConfig = field(default_factory=PlacementConfig)
    lm: LmConfig = field(default_factory=LmConfig)
    mining: TokenMiningConfig = field(default_factory=TokenMiningConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)
    vlm: VlmConfig = field(default_factory=VlmConfig)

    def validate(self) -> None:
        if self.stage not in STAGES:
            raise ConfigError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 1 and batch_size >= 2")
        enc, r = self.encoder, self.data.ranges
        if (enc.image_size, enc.patch_size, enc.channels) != (r.image_size, r.patch_size, r.channels):
            raise ConfigError("encoder image_size/patch_size/channels must match data.ranges")
        if r.frames > enc.max_frames:
            raise ConfigError(f"data has {r.frames} frames but encoder.max_frames is {enc.max_frames}")
        if r.max_caption_len > enc.max_seq_len:
            raise ConfigError("data.ranges.max_caption_len exceeds encoder.max_seq_len")
        if enc.vocab_size != self.lm.vocab_size:
            raise ConfigError("text tower and LM share one vocabulary; vocab sizes differ")
        m = self.mining
        if (m.d_video, m.d_key, m.d_lm) != (enc.hidden_dim, enc.hidden_dim, self.lm.d_model):
            raise ConfigError("mining.d_video/d_key must equal encoder.hidden_dim and mining.d_lm lm.d_model")
        if not 1 <= self.vlm.keyframes <= r.frames:
            raise ConfigError(f"vlm.keyframes must be in [1, {r.frames}]")
        if self.lm.max_seq_len < self.vlm.keyframes + r.max_caption_len + 2:
            raise ConfigError("lm.max_seq_len too short for keyframe tokens plus the longest text")
        if self.stage == "vlm-stage1" and not self.vlm.align_checkpoint:
            raise ConfigError("vlm-stage1 needs vlm.align_checkpoint")
        if self.stage == "vlm-stage2" and not self.vlm.init_checkpoint:
            raise ConfigError("vlm-stage2 needs vlm.init_checkpoint (a stage-1 checkpoint)")


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def to_flat(obj, prefix: str = "") -> dict:
    flat = {}
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if dataclasses.is_dataclass(value):
            flat.update(to_flat(value, key + "."))
        else:
            flat[key] = value
    return flat


def _coerce(tp, value, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null")):
            return None
        return _coerce(args[0], value, key)
    try:
        if tp is bool:
            if isinstance(value, str):
                if value.lower() not in ("true", "false"):
                    raise ValueError(value)
                return value.lower() == "true"
            return bool(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key}: cannot read {value!r} as {tp.__name__}") from None
    raise ConfigError(f"config key {key}: unsupported type {tp}")


def _build(cls, flat: dict, prefix: str, used: set):
    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}{f.name}"
        tp = hints[f.name]
        if _is_dataclass_type(tp):
            kwargs[f.name] = _build(tp, flat, key + ".", used)
        elif key in flat:
            used.add(key)
            kwargs[f.name] = _coerce(tp, flat[key], key)
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def from_flat(flat: dict) -> RunConfig:
    used: set = set()
    cfg = _build(RunConfig, flat, "", used)
    unknown = sorted(set(flat) - used)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return cfg


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    flat = to_flat(cfg)
    for key in overrides:
        if key not in flat:
            raise ConfigError(f"unknown config key {key!r}")
    flat.update(overrides)
    return from_flat(flat)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(to_flat(cfg), sort_keys=False, default_flow_style=False)


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    flat = yaml.safe_load(text) or {}
    if not isinstance(flat, dict) or any(isinstance(v, dict) for v in flat.values()):
        raise ConfigError(f"{path}: expected flat 'section.key: value' lines")
    return from_flat(flat)


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
