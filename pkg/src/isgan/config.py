"""Run configuration: nested dataclasses loaded strictly from JSON plus
dotted-path overrides."""

from __future__ import annotations

import dataclasses
import json
import os
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any


class ConfigKeyError(ValueError):
    """Unknown or malformed configuration key."""


@dataclass
class DatasetConfig:
    kind: str = "synth"  # synth | synth_dir | market | celeb
    path: str | None = None
    seed: int | None = None  # defaults to the run seed
    n_train_ids: int = 20
    n_test_ids: int = 20
    imgs_per_id: int = 16
    queries_per_id: int = 2


@dataclass
class ModelSection:
    resolution: list[int] = field(default_factory=lambda: [64, 32])
    branches: list[int] = field(default_factory=lambda: [1, 2, 3])
    p: int = 32
    backbone_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 64])
    backbone_strides: list[int] = field(default_factory=lambda: [2, 2, 2, 1])
    map_height: int | None = 6
    head_channels: int = 64
    noise_dim: int = 128
    gen_base: list[int] = field(default_factory=lambda: [2, 1])
    gen_width: int = 256
    gen_dropout: float = 0.5
    disc_width: int = 32


@dataclass
class WeightsSection:
    R: float = 20.0
    U: float = 1.0
    S: float = 10.0
    PS: float = 10.0
    D: float = 1.0
    C: float = 2.0
    U_schedule: dict[str, float] = field(default_factory=dict)


@dataclass
class AugmentSection:
    flip_p: float = 0.5
    crop: bool = True
    erase_p: float = 0.5


@dataclass
class TrainSection:
    scale: str = "toy"  # toy | full
    toy_factor: int = 50
    epochs: list[int] | None = None  # per-stage override
    lr: list[float] | None = None  # per-stage override
    warmup: int | None = None
    stages: list[int] = field(default_factory=lambda: [1, 2, 3])
    P: int = 4
    K: int = 4
    batches_per_epoch: int | None = None
    label_smoothing: float = 0.1
    momentum_stats: float = 0.1
    decorrelation_abs: bool = True
    clip_norm: float | None = 10.0
    disc_lr_mult: float = 1.0
    eval_each_epoch: bool = True
    augment: AugmentSection = field(default_factory=AugmentSection)


@dataclass
class EvalSection:
    checkpoint: str | None = None
    filter: bool = True
    probe_split: str = "gallery"
    attribute: str = "torso_color"
    probe_seed: int = 0
    features: str = "R"  # exported stream: R | U
    grid_mode: str = "recon"
    grid_ids: list[int] = field(default_factory=lambda: [0, 1])
    alphas: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5, 0.75, 1.0])


@dataclass
class RunConfig:
    variant: str = "DC"  # DC | KL
    mode: str = "short_term"  # short_term | long_term
    seed: int = 0
    out: str = "runs/toy"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    weights: WeightsSection | None = None  # None -> defaults for the variant
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def resolved_weights(self) -> WeightsSection:
        if self.weights is not None:
            return self.weights
        if self.variant == "KL":
            return WeightsSection(U=1e-3, U_schedule={"2": 1e-3, "3": 1e-2})
        return WeightsSection()

    def validate(self) -> "RunConfig":
        if self.variant not in ("DC", "KL"):
            raise ConfigKeyError(f"variant: expected DC or KL, got {self.variant!r}")
        if self.mode not in ("short_term", "long_term"):
            raise ConfigKeyError(f"mode: expected short_term or long_term, got {self.mode!r}")
        if self.dataset.kind not in ("synth", "synth_dir", "market", "celeb"):
            raise ConfigKeyError(f"dataset.kind: unknown kind {self.dataset.kind!r}")
        if self.train.scale not in ("toy", "full"):
            raise ConfigKeyError(f"train.scale: expected toy or full, got {self.train.scale!r}")
        if self.eval.features not in ("R", "U"):
            raise ConfigKeyError(f"eval.features: expected R or U, got {self.eval.features!r}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = dataclasses.asdict(self.resolved_weights())
        return d


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _unwrap_optional(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0]
    return tp


def from_dict(cls, data: dict, path: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigKeyError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        where = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigKeyError(f"unknown config key {where!r}")
        tp = _unwrap_optional(hints[key])
        if _is_dataclass_type(tp) and value is not None:
            value = from_dict(tp, value, where)
        kwargs[key] = value
    return cls(**kwargs)


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: dict[str, str]) -> dict:
    """Set dotted keys, e.g. ``{"train.P": "8"}``; values are parsed as JSON when possible."""
    for dotted, raw in overrides.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            if node.get(part) is None:
                node[part] = {}
            node = node[part]
            if not isinstance(node, dict):
                raise ConfigKeyError(f"cannot set {dotted!r}: {part!r} is not a section")
        node[parts[-1]] = _parse_value(raw) if isinstance(raw, str) else raw
    return data


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, str] | None = None) -> RunConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    if overrides:
        data = apply_overrides(data, overrides)
    return from_dict(RunConfig, data).validate()


def write_resolved(cfg: RunConfig, out_dir: str | os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config_resolved.json"
    path.write_text(json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
    return path
