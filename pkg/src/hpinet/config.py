"""Architecture and training configuration records plus the key=value format.

A config file is plain text, one ``key=value`` per line, ``#`` comments and
blank lines ignored. Keys are the union of :class:`HpiConfig` and
:class:`TrainConfig` fields; anything else is rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from typing import Any

from .errors import ConfigError

DEFAULT_PATCH_SIZES = (12, 16, 20, 24, 12, 16, 20, 24)

# Channel widths whose parameter count lands on the published S/M/L sizes
# (0.46M / 0.90M / 1.44M at K=8, scale 4). See scripts/solve_channel_widths.py.
VARIANT_CHANNELS = {"S": 43, "M": 61, "L": 77}


@dataclass
class HpiConfig:
    scale: int = 4
    blocks: int = 8
    patch_sizes: tuple[int, ...] = DEFAULT_PATCH_SIZES
    channels: int = VARIANT_CHANNELS["M"]
    heads: int = 1
    qk_dim: int = 0  # 0 means "same as channels"
    ffn_ratio: float = 2.0
    gumbel_tau: float = 1.0
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.patch_sizes = tuple(int(p) for p in self.patch_sizes)
        if self.qk_dim == 0:
            self.qk_dim = self.channels
        self.validate()

    def validate(self) -> None:
        if self.scale not in (1, 2, 3, 4):
            raise ConfigError(f"scale must be 1, 2, 3 or 4, got {self.scale}")
        if self.blocks < 1 or len(self.patch_sizes) != self.blocks:
            raise ConfigError(f"patch_sizes has {len(self.patch_sizes)} entries for {self.blocks} blocks")
        if min(self.patch_sizes) < 1:
            raise ConfigError(f"patch sizes must be positive: {self.patch_sizes}")
        if self.channels < 1 or self.heads < 1:
            raise ConfigError("channels and heads must be positive")
        if self.channels % self.heads or self.qk_dim % self.heads:
            raise ConfigError(f"heads={self.heads} must divide channels={self.channels} "
                              f"and qk_dim={self.qk_dim}")
        if self.ffn_hidden < 1:
            raise ConfigError(f"ffn_ratio {self.ffn_ratio} gives an empty FFN")
        if not self.gumbel_tau > 0:
            raise ConfigError(f"gumbel_tau must be positive, got {self.gumbel_tau}")

    @property
    def ffn_hidden(self) -> int:
        return int(round(self.ffn_ratio * self.channels))

    @property
    def max_patch(self) -> int:
        return max(self.patch_sizes)

    def replace(self, **changes) -> "HpiConfig":
        if "channels" in changes and "qk_dim" not in changes and self.qk_dim == self.channels:
            changes["qk_dim"] = 0
        return dataclasses.replace(self, **changes)

    @classmethod
    def variant(cls, name: str, **changes) -> "HpiConfig":
        """HPINet-S/M/L: identical except for the channel width."""
        return cls(channels=VARIANT_CHANNELS[name.upper()], **changes)

    @classmethod
    def micro(cls, **changes) -> "HpiConfig":
        base = dict(channels=16, blocks=4, patch_sizes=(6, 8, 10, 12))
        base.update(changes)
        return cls(**base)


@dataclass
class TrainConfig:
    epochs: int = 20
    base_lr: float = 3e-4
    lr_half_period: int = 200
    batch_size: int = 2
    crop_start: int = 96
    crop_end: int = 192
    augment: bool = True
    steps_per_epoch: int = 0  # 0 means one pass over the images
    save_every: int = 0

    def validate(self, scale: int) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.lr_half_period < 1:
            raise ConfigError("epochs, batch_size and lr_half_period must be positive")
        if not 0 < self.crop_start <= self.crop_end:
            raise ConfigError(f"need 0 < crop_start <= crop_end, got {self.crop_start}, {self.crop_end}")
        if self.crop_start % scale or self.crop_end % scale:
            raise ConfigError(f"crop sizes must be divisible by scale {scale}")

    @classmethod
    def full_scale(cls, **changes) -> "TrainConfig":
        base = dict(crop_start=196, crop_end=896, batch_size=6)
        base.update(changes)
        return cls(**base)


@dataclass
class CliConfig:
    model: HpiConfig = field(default_factory=HpiConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(raw: str, like: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def config_items(obj) -> list[tuple[str, Any]]:
    return [(f.name, getattr(obj, f.name)) for f in fields(obj)]


def render(cfg: CliConfig | HpiConfig) -> str:
    objs = [cfg.model, cfg.train] if isinstance(cfg, CliConfig) else [cfg]
    return "".join(f"{k}={_format(v)}\n" for o in objs for k, v in config_items(o))


def parse_items(text: str) -> list[tuple[int, str, str]]:
    """Split config text into (line number, key, raw value) triples."""
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = s.split("=", 1)
        out.append((lineno, key.strip(), raw))
    return out


def _apply(target_types: dict[str, Any], items, allow_unknown: bool = False):
    model_kw, train_kw, extra = {}, {}, {}
    model_defaults = HpiConfig.__dataclass_fields__
    for lineno, key, raw in items:
        if key in model_defaults:
            like = getattr(target_types["model"], key)
            model_kw[key] = _coerce(raw, like, key)
        elif "train" in target_types and key in TrainConfig.__dataclass_fields__:
            like = getattr(target_types["train"], key)
            train_kw[key] = _coerce(raw, like, key)
        elif allow_unknown:
            extra[key] = raw.strip()
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return model_kw, train_kw, extra


def parse(text: str) -> CliConfig:
    """Inverse of :func:`render` for a full CLI config."""
    model_kw, train_kw, _ = _apply({"model": HpiConfig(), "train": TrainConfig()}, parse_items(text))
    if "patch_sizes" in model_kw and "blocks" not in model_kw:
        model_kw["blocks"] = len(model_kw["patch_sizes"])
    model = HpiConfig(**model_kw)
    train = TrainConfig(**train_kw)
    train.validate(model.scale)
    return CliConfig(model, train)


def parse_model(text: str) -> tuple[HpiConfig, dict[str, str]]:
    """Parse a model config block; keys outside HpiConfig are returned raw."""
    model_kw, _, extra = _apply({"model": HpiConfig()}, parse_items(text), allow_unknown=True)
    return HpiConfig(**model_kw), extra
