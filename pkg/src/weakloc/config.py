"""Experiment configuration: nested sections with paper defaults.

Files are YAML or JSON documents with optional sections ``data``,
``geometry``, ``sp``, ``model``, ``train`` and ``eval`` plus a top-level
``seed``. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .data import DEFAULT_CLASSES
from .errors import ConfigError
from .model import BackboneConfig
from .spn import SPConfig


@dataclass(frozen=True)
class DataConfig:
    subjects: int = 12
    frames: int = 250
    split_ratio: float = 0.8
    classes: tuple = DEFAULT_CLASSES


@dataclass(frozen=True)
class GeometryConfig:
    crop: float = 0.10
    size: int = 224
    out_rows: Optional[int] = None
    out_cols: Optional[int] = None


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.05
    momentum: float = 0.8
    nesterov: bool = True
    weight_decay: float = 5e-4
    lr_step_epochs: int = 5
    lr_factor: float = 0.1
    batch_size: int = 32
    max_epochs: int = 12
    patience: int = 3
    min_improvement: float = 0.002
    val_fraction: float = 0.1
    flip_p: float = 0.5
    samples_per_epoch: int = 0  # 0 -> size of the training set
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if not self.lr0 >= 0:
            raise ConfigError("train.lr0 must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("train.momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("train.weight_decay must be >= 0")
        if not 0 < self.lr_factor < 1:
            raise ConfigError("train.lr_factor must lie in (0, 1)")
        if self.lr_step_epochs < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("train.lr_step_epochs, batch_size and max_epochs must be >= 1")
        if not 0 <= self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in [0, 1)")
        return self


@dataclass(frozen=True)
class EvalConfig:
    threshold_rule: str = "literal"
    accuracy_mode: str = "one_vs_rest"
    batch_size: int = 64
    latency_frames: int = 50
    overlays: int = 2


SECTIONS = {
    "data": DataConfig,
    "geometry": GeometryConfig,
    "sp": SPConfig,
    "model": BackboneConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    sp: SPConfig = field(default_factory=SPConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed),
                                   train=dataclasses.replace(self.train, seed=int(seed)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps() + "\n")
        return path


def _section(cls, values, name):
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown keys in section {name!r}: {unknown}")
    kwargs = {}
    for k, v in values.items():
        default = known[k].default
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    try:
        obj = cls(**kwargs)
        if hasattr(obj, "validate"):
            obj.validate()
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"section {name!r}: {exc}") from exc
    return obj


def from_dict(doc: Optional[dict]) -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed"})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    sections = {name: _section(cls, doc.get(name), name) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(seed=int(doc.get("seed", 0)), **sections)
    if "seed" in doc and "seed" not in (doc.get("train") or {}):
        cfg = cfg.with_seed(cfg.seed)
    return cfg


def load_config(path=None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: cannot parse config: {exc}") from exc
    return from_dict(doc)
