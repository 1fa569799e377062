"""Configuration records shared by every module.

The config is a nested dataclass tree that round-trips losslessly through
YAML. Architecture-determining fields are checked by ``validate_config``
and summarized by ``structural_fingerprint`` so checkpoints can refuse to
load into a mismatched model.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Raised when a configuration violates an invariant."""


BACKBONES = ("tiny_conv", "pvt_like")

# Channel-wise normalization defaults follow the ImageNet convention used by
# pretrained backbone initializations.
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class EncoderConfig:
    backbone: str = "tiny_conv"
    # tiny_conv: channels of the five stride-2 stages (outputs taken at /8, /16, /32)
    tiny_channels: tuple[int, ...] = (16, 24, 32, 48, 64)
    # pvt_like: embedding dims / depths / heads of the four transformer stages
    pvt_dims: tuple[int, ...] = (32, 64, 160, 256)
    pvt_depths: tuple[int, ...] = (2, 2, 2, 2)
    pvt_heads: tuple[int, ...] = (1, 2, 5, 8)
    pvt_sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    # optional path to pretrained backbone weights (state dict)
    pretrained: str | None = None


@dataclass
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 30
    batch_windows: int = 14
    clip_length: int = 6
    window_stride: int = 3
    seed: int = 0
    deep_supervision: bool = True
    # keep the gradient path through the previous frame's features (single-step
    # recurrence); set True to cut it
    detach_previous: bool = False
    max_steps: int | None = None
    checkpoint_every: int | None = None


@dataclass
class ModelConfig:
    input_size: tuple[int, int] = (352, 352)
    feature_channels: int = 32
    memory_capacity: int = 35
    memory_stride: int = 5
    key_channels: int = 8
    value_channels: int = 16
    attention_pool_window: int = 4
    use_short_term: bool = True
    use_long_term: bool = True
    use_alignment: bool = True
    use_mask_attention: bool = True
    norm_mean: tuple[float, ...] = IMAGENET_MEAN
    norm_std: tuple[float, ...] = IMAGENET_STD
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        return _asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return _from_dict(cls, data)


def _asdict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            out[f.name] = _asdict(v)
        elif isinstance(v, tuple):
            out[f.name] = list(v)
        else:
            out[f.name] = v
    return out


def _from_dict(cls, data: dict):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}, got {type(data).__name__}")
    kwargs = {}
    names = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in names:
            raise ConfigError(f"unknown config field {cls.__name__}.{key}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value)
        elif isinstance(default, tuple):
            kwargs[key] = tuple(value)
        elif isinstance(default, bool):
            kwargs[key] = value
        elif isinstance(default, (int, float)) and isinstance(value, str):
            # YAML leaves dot-less scientific notation like 5e-4 as a string
            caster = type(default)
            try:
                kwargs[key] = caster(value)
            except ValueError:
                raise ConfigError(
                    f"config field {cls.__name__}.{key} expects "
                    f"{caster.__name__}, got {value!r}") from None
        else:
            kwargs[key] = value
    return cls(**kwargs)


def validate_config(cfg: ModelConfig) -> ModelConfig:
    """Check every invariant; return the config unchanged or raise ConfigError."""
    h, w = cfg.input_size
    if h <= 0 or w <= 0:
        raise ConfigError(f"input_size must be positive, got {cfg.input_size}")
    if h % 32 != 0 or w % 32 != 0:
        raise ConfigError(f"input_size {cfg.input_size} not divisible by 32")
    if h < 64 or w < 64:
        # the /32 level must keep a >= 2x2 map or normalization statistics
        # degenerate to a single value per group
        raise ConfigError(f"input_size {cfg.input_size} too small; need >= 64 per side")
    if cfg.memory_capacity < 1:
        raise ConfigError(f"memory_capacity must be >= 1, got {cfg.memory_capacity}")
    if cfg.memory_stride < 1:
        raise ConfigError(f"memory_stride must be >= 1, got {cfg.memory_stride}")
    if cfg.key_channels < 1 or cfg.value_channels < 1:
        raise ConfigError("key_channels and value_channels must be >= 1")
    if 2 * cfg.value_channels != cfg.feature_channels:
        raise ConfigError(
            f"feature_channels ({cfg.feature_channels}) must equal twice the "
            f"value_channels ({cfg.value_channels}): the long-term feature "
            "concatenates the current value with the retrieved one"
        )
    if cfg.attention_pool_window < 1:
        raise ConfigError("attention_pool_window must be >= 1")
    if cfg.encoder.backbone not in BACKBONES:
        raise ConfigError(
            f"unknown backbone {cfg.encoder.backbone!r}; expected one of {BACKBONES}"
        )
    if cfg.encoder.backbone == "tiny_conv" and len(cfg.encoder.tiny_channels) != 5:
        raise ConfigError("tiny_channels must list five stage widths")
    if cfg.encoder.backbone == "pvt_like":
        n = {len(cfg.encoder.pvt_dims), len(cfg.encoder.pvt_depths),
             len(cfg.encoder.pvt_heads), len(cfg.encoder.pvt_sr_ratios)}
        if n != {4}:
            raise ConfigError("pvt_dims/pvt_depths/pvt_heads/pvt_sr_ratios must each list 4 stages")
    if len(cfg.norm_mean) != 3 or len(cfg.norm_std) != 3:
        raise ConfigError("norm_mean and norm_std must have 3 channels")
    if any(s <= 0 for s in cfg.norm_std):
        raise ConfigError("norm_std entries must be positive")
    t = cfg.train
    if t.lr <= 0 or t.weight_decay < 0:
        raise ConfigError("lr must be > 0 and weight_decay >= 0")
    if t.epochs < 1 or t.batch_windows < 1:
        raise ConfigError("epochs and batch_windows must be >= 1")
    if t.clip_length < 2:
        raise ConfigError("clip_length must be >= 2 so every frame past the first has a predecessor")
    if t.window_stride < 1:
        raise ConfigError("window_stride must be >= 1")
    return cfg


def structural_fingerprint(cfg: ModelConfig) -> dict:
    """Fields that determine parameter shapes; checkpoints must agree on these."""
    enc = cfg.encoder
    fp: dict[str, Any] = {
        "feature_channels": cfg.feature_channels,
        "key_channels": cfg.key_channels,
        "value_channels": cfg.value_channels,
        "backbone": enc.backbone,
    }
    if enc.backbone == "tiny_conv":
        fp["tiny_channels"] = list(enc.tiny_channels)
    else:
        fp["pvt_dims"] = list(enc.pvt_dims)
        fp["pvt_depths"] = list(enc.pvt_depths)
        fp["pvt_heads"] = list(enc.pvt_heads)
        fp["pvt_sr_ratios"] = list(enc.pvt_sr_ratios)
    return fp


def load_config(path: str | Path) -> ModelConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    return validate_config(ModelConfig.from_dict(data))


def save_config(cfg: ModelConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


def apply_overrides(cfg: ModelConfig, overrides: list[str]) -> ModelConfig:
    """Apply ``dotted.name=value`` overrides on top of ``cfg``.

    Values are parsed as YAML, so ``train.lr=3e-4``, ``use_long_term=false``
    and ``input_size=[64,64]`` all work.
    """
    data = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form name=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        node = data
        for key in keys[:-1]:
            if key not in node or not isinstance(node[key], dict):
                raise ConfigError(f"unknown config field {dotted!r}")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigError(f"unknown config field {dotted!r}")
        node[keys[-1]] = yaml.safe_load(raw)
    return validate_config(ModelConfig.from_dict(data))
