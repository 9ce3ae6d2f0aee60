"""Run configuration: nested dataclasses that load from and dump to one JSON document."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .augmentation import AugRanges
from .pointcloud import SHAPE_KINDS


class ConfigError(ValueError):
    pass


@dataclass
class CorpusConfig:
    kinds: tuple[str, ...] = SHAPE_KINDS
    per_class: int = 64
    n_points: int = 512
    seed: int = 0


@dataclass
class GAConfig:
    enabled: bool = True
    n_candidates: int = 16
    epsilon: float = 1e-3
    c: float = 1e-3
    capacity: Optional[int] = None  # None: size of the pretraining corpus
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)


@dataclass
class GFMConfig:
    enabled: bool = True
    invert_jitter: bool = True


@dataclass
class EncoderConfig:
    trunk: tuple[int, ...] = (3, 64, 64)
    head: tuple[int, ...] = (64, 64, 32)
    pooling: str = "max"


@dataclass
class OptimConfig:
    kind: str = "adam"  # "adam" or "sgd"
    lr_max: float = 3e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    cycles: int = 3
    epochs_per_cycle: int = 10


@dataclass
class ProbeConfig:
    enabled: bool = True
    every: int = 1  # probe every k epochs (the last epoch is always probed)
    per_class: int = 32
    n_points: int = 512
    ridge: float = 1e-2
    split_seed: int = 0
    augment: bool = True  # probe on rigidly augmented held-out clouds


@dataclass
class TrainConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    augment: AugRanges = field(default_factory=AugRanges)
    point_budget: Optional[int] = 256
    center_views: bool = True  # subtract each view's centroid before encoding
    ga: GAConfig = field(default_factory=GAConfig)
    gfm: GFMConfig = field(default_factory=GFMConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    tau: float = 0.5
    batch_size: int = 16
    optim: OptimConfig = field(default_factory=OptimConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)

    @property
    def epochs(self) -> int:
        return self.optim.cycles * self.optim.epochs_per_cycle

    def validate(self) -> "TrainConfig":
        positive = {
            "corpus.per_class": self.corpus.per_class,
            "corpus.n_points": self.corpus.n_points,
            "ga.n_candidates": self.ga.n_candidates,
            "batch_size": self.batch_size,
            "tau": self.tau,
            "optim.lr_max": self.optim.lr_max,
            "optim.epochs_per_cycle": self.optim.epochs_per_cycle,
            "probe.every": self.probe.every,
        }
        for key, val in positive.items():
            if not val > 0:
                raise ConfigError(f"{key} must be positive, got {val}")
        if self.optim.cycles < 0 or self.optim.lr_min < 0 or self.optim.weight_decay < 0:
            raise ConfigError("optim.cycles, lr_min and weight_decay must be non-negative")
        if self.point_budget is not None and self.point_budget < 1:
            raise ConfigError("point_budget must be positive or null")
        if self.ga.capacity is not None and self.ga.capacity < 1:
            raise ConfigError("ga.capacity must be positive or null")
        unknown = set(self.corpus.kinds) - set(SHAPE_KINDS)
        if unknown or len(self.corpus.kinds) < 2:
            raise ConfigError(f"corpus.kinds must name >= 2 of {SHAPE_KINDS}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["augment"] = self.augment.to_dict()
        return _listify(d)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return _build(cls, d, "").validate()

    def with_overrides(self, overrides: dict[str, Any]) -> "TrainConfig":
        """Apply ``{"section.key": value}`` overrides and revalidate."""
        d = self.to_dict()
        for dotted, value in overrides.items():
            node = d
            parts = dotted.split(".")
            for p in parts[:-1]:
                if not isinstance(node.get(p), dict):
                    raise ConfigError(f"unknown config key {dotted!r}")
                node = node[p]
            if parts[-1] not in node:
                raise ConfigError(f"unknown config key {dotted!r}")
            node[parts[-1]] = value
        return TrainConfig.from_dict(d)


def _listify(obj):
    if isinstance(obj, dict):
        return {k: _listify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_listify(v) for v in obj]
    return obj


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    if cls is AugRanges:
        try:
            return AugRanges.from_dict(data)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{prefix}: {exc}") from None
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys under {prefix or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name)
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{prefix}{name}.")
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def load_config(path) -> TrainConfig:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    return TrainConfig.from_dict(data)


def dump_config(config: TrainConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
