"""Model configuration: variant presets and the JSON config file."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

VARIANTS = ("n", "s", "m", "l")
BLOCK_TYPES = ("repblock", "cspstackrep")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "n"
    width_mult: float = 1.0
    depth_mult: float = 1.0
    block_type: str = "repblock"
    cc: float = 0.5
    num_classes: int = 80
    activation: str = "relu"
    reg_max: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.block_type not in BLOCK_TYPES:
            raise ConfigError(f"unknown block_type {self.block_type!r}; expected one of {BLOCK_TYPES}")
        if not 0 < self.cc <= 1:
            raise ConfigError(f"cc must be in (0, 1], got {self.cc}")
        if self.width_mult <= 0 or self.depth_mult <= 0:
            raise ConfigError("width_mult and depth_mult must be positive")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.reg_max < 0:
            raise ConfigError("reg_max must be >= 0")
        if self.activation not in ("relu", "silu", "lrelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def box_loss(self) -> str:
        # N uses SIoU; every other variant GIoU.
        return "siou" if self.variant == "n" else "giou"

    @property
    def use_dfl(self) -> bool:
        return self.reg_max > 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model config keys: {', '.join(unknown)}")
        base = preset(d.get("variant", "n"))
        return replace(base, **d)


_PRESETS = {
    "n": ModelConfig("n", 1.0, 1.0, "repblock", 0.5, 80, "relu", 0),
    "s": ModelConfig("s", 2.0, 1.0, "repblock", 0.5, 80, "relu", 0),
    "m": ModelConfig("m", 3.0, 1.5, "cspstackrep", 2 / 3, 80, "silu", 16),
    "l": ModelConfig("l", 4.0, 2.0, "cspstackrep", 2 / 3, 80, "silu", 16),
}


def preset(variant: str, **overrides) -> ModelConfig:
    if variant not in _PRESETS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return replace(_PRESETS[variant], **overrides)


def load_model_config(path: str | Path) -> ModelConfig:
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: model config must be a JSON object")
    return ModelConfig.from_dict(data)
