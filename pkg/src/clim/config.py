"""JSON run configuration with exhaustive key validation."""

import json
import os
from dataclasses import dataclass, field, fields

from .core import ContractError
from .data import AugmentPolicy, ShiftParams
from .losses import LossConfig
from .model import ModelSpec
from .training import TrainConfig

# 2e-5 suits fine-tuning a pretrained encoder; the desk
# networks start from scratch and need a larger step to move at all
DESK_LR = 1e-3


class ConfigError(ContractError):
    pass


@dataclass
class DataConfig:
    dir: str = None
    preset: str = "books:electronics"
    seed: int = 0
    hash_seed: int = 0
    shift: ShiftParams = field(default_factory=ShiftParams)


@dataclass
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    model: ModelSpec = None
    data: DataConfig = field(default_factory=DataConfig)
    paired_augmentation: str = None


_TRAIN_SCALARS = [f.name for f in fields(TrainConfig) if f.name not in ("loss", "augment")]


def _build(cls, raw, where, exclude=()):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where} must be a JSON object")
    allowed = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**raw)
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_run_config(doc, base_dir="."):
    """Build a RunConfig from a parsed JSON document.

    Layout::

        {"train": {...}, "loss": {...}, "augment": {...}, "model": {...},
         "data": {"dir", "preset", "seed", "hash_seed", "shift": {...}},
         "paired_augmentation": path}

    Relative paths resolve against ``base_dir``.
    """
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - {"train", "loss", "augment", "model", "data", "paired_augmentation"})
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    loss = _build(LossConfig, doc.get("loss", {}), "loss")
    augment = _build(AugmentPolicy, doc.get("augment", {}), "augment")
    train_raw = dict(doc.get("train", {}))
    train = _build(TrainConfig, {**train_raw, "loss": loss, "augment": augment}, "train")
    if set(train_raw) & {"loss", "augment"}:
        raise ConfigError("unknown config key(s) in train: loss/augment belong at top level")
    model = None
    if "model" in doc:
        model = _build(ModelSpec, doc["model"], "model", exclude=("with_domain_head",))
    data_raw = dict(doc.get("data", {}))
    shift = _build(ShiftParams, data_raw.pop("shift", {}), "data.shift")
    data = _build(DataConfig, {**data_raw, "shift": shift}, "data")

    def resolve(p):
        return None if p is None else os.path.normpath(os.path.join(base_dir, p))

    data.dir = resolve(data.dir)
    paired = resolve(doc.get("paired_augmentation"))
    for p in (data.dir, paired):
        if p is not None and not os.path.exists(p):
            raise FileNotFoundError(f"path does not exist: {p}")
    return RunConfig(train=train, model=model, data=data, paired_augmentation=paired)


def load_run_config(path):
    with open(path, encoding="utf-8") as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    return parse_run_config(doc, base_dir=os.path.dirname(os.path.abspath(path)))
