"""Training configuration and its JSON file (``{"model": ..., "train": ...}``)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from ..losses import CLS_LOSSES
from ..netdef.config import ConfigError, ModelConfig, preset


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr0: float = 0.01
    lrf: float = 0.0002
    momentum: float = 0.937
    weight_decay: float = 5e-4
    ema_decay: float = 0.9999
    warmup_epochs: float = 1.0
    seed: int = 0
    img_size: int = 64
    mosaic_prob: float = 1.0
    mosaic_epochs_frac: float = 0.9
    mixup_prob: float = 0.0
    mixup_beta: float = 32.0
    atss_epochs: int = 4
    cls_loss: str = "vfl"
    cls_weight: float = 1.0
    box_weight: float = 2.5
    dfl_weight: float = 0.5
    teacher: str | None = None
    distill_weight: float = 1.0
    distill_temperature: float = 1.0
    val_size: int = 200
    eval_every: int = 1

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        # lr0 == lrf == 0 is a frozen run (weights never move)
        if not (self.lr0 > self.lrf >= 0 or self.lr0 == self.lrf == 0):
            raise ConfigError("need lr0 > lrf >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")
        if not 0 < self.ema_decay < 1:
            raise ConfigError("ema_decay must be in (0, 1)")
        if self.weight_decay < 0 or self.warmup_epochs < 0 or self.atss_epochs < 0:
            raise ConfigError("weight_decay, warmup_epochs and atss_epochs must be >= 0")
        if self.img_size % 32 or self.img_size < 32:
            raise ConfigError("img_size must be a positive multiple of 32")
        for name in ("mosaic_prob", "mosaic_epochs_frac", "mixup_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must be in [0, 1]")
        if self.cls_loss not in CLS_LOSSES:
            raise ConfigError(f"unknown cls_loss {self.cls_loss!r}; expected one of {sorted(CLS_LOSSES)}")
        if self.val_size < 1 or self.eval_every < 1:
            raise ConfigError("val_size and eval_every must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown train config keys: {', '.join(unknown)}")
        return replace(cls(), **d)


def toy_model_config(variant: str = "n") -> ModelConfig:
    return preset(variant, num_classes=3)


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig]:
    with open(path) as fh:
        data = json.load(fh)
    return configs_from_dict(data, str(path))


def configs_from_dict(data, where: str = "config") -> tuple[ModelConfig, TrainConfig]:
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a JSON object")
    unknown = sorted(set(data) - {"model", "train"})
    if unknown:
        raise ConfigError(f"{where}: unknown top-level keys: {', '.join(unknown)}")
    model = data.get("model", {})
    if "num_classes" not in model:
        model = {**model, "num_classes": 3}
    return ModelConfig.from_dict(model), TrainConfig.from_dict(data.get("train", {}))


def dump_config(model: ModelConfig, train: TrainConfig) -> str:
    return json.dumps({"model": model.to_dict(), "train": train.to_dict()}, indent=2, sort_keys=True)
