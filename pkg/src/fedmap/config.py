"""Experiment configuration: nested dataclasses loaded from JSON or YAML.

Unknown keys are rejected at every level so typos fail loudly instead of
silently falling back to defaults.
"""

from __future__ import annotations

import dataclasses
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from fedmap.federation import AGGREGATORS


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EncoderSection:
    mapping_size: int = 128
    scale: float = 10.0


@dataclass(frozen=True)
class NetworkSection:
    hidden: int = 256
    layers: int = 3
    out_channels: int = 3
    batchnorm: bool = True


@dataclass(frozen=True)
class TrainingSection:
    lr: float = 1e-4
    local_epochs: int = 100
    rounds: int = 1
    batch_size: int | None = 1024
    precision: str = "fp16"
    pretrain_iters: int = 300
    pretrain_size: int = 64


@dataclass(frozen=True)
class FederationSection:
    n_agents: int = 4
    layout: str = "grid"
    aggregator: str = "fedavg"
    supervision: str = "unknown"
    unknown_value: float = 0.5
    eta: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.99
    tau: float = 1e-3


@dataclass(frozen=True)
class RefinementSection:
    min_component: int = 200
    connectivity: int = 8


@dataclass(frozen=True)
class EvalSection:
    n_routes: int = 75
    threshold: str | float = 0.42  # or "otsu"
    min_separation: float = 0.1


@dataclass(frozen=True)
class MetaSection:
    outer_step: float = 0.1
    inner_iters: int = 16
    inner_lr: float = 1e-4
    meta_iterations: int = 1000
    tasks_per_meta_step: int = 4
    map_size: int = 64
    maps_per_kind: int = 30


@dataclass(frozen=True)
class DataSection:
    map_size: int = 256
    kinds: tuple[str, ...] = ("crevasse", "crater", "blocks", "crevasse")


@dataclass(frozen=True)
class PathsSection:
    maps: str | None = None
    init: str | None = None
    outputs: str = "runs"


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    encoder: EncoderSection = field(default_factory=EncoderSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    federation: FederationSection = field(default_factory=FederationSection)
    refinement: RefinementSection = field(default_factory=RefinementSection)
    eval: EvalSection = field(default_factory=EvalSection)
    meta: MetaSection = field(default_factory=MetaSection)
    data: DataSection = field(default_factory=DataSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        validate(self)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **sections) -> ExperimentConfig:
        return dataclasses.replace(self, **sections)


def validate(cfg: ExperimentConfig) -> None:
    checks = [
        (cfg.encoder.mapping_size >= 1, "encoder.mapping_size must be >= 1"),
        (cfg.encoder.scale > 0, "encoder.scale must be > 0"),
        (cfg.network.hidden >= 1 and cfg.network.layers >= 1, "network sizes must be >= 1"),
        (cfg.network.out_channels in (1, 3), "network.out_channels must be 1 or 3"),
        (cfg.training.lr > 0, "training.lr must be > 0"),
        (cfg.training.local_epochs >= 0, "training.local_epochs must be >= 0"),
        (cfg.training.rounds >= 0, "training.rounds must be >= 0"),
        (cfg.training.batch_size is None or cfg.training.batch_size >= 1,
         "training.batch_size must be >= 1 or null"),
        (cfg.training.precision in ("fp16", "fp32"), "training.precision must be fp16 or fp32"),
        (cfg.federation.n_agents >= 1, "federation.n_agents must be >= 1"),
        (cfg.federation.layout in ("grid", "strips"), "federation.layout must be grid or strips"),
        (cfg.federation.aggregator in AGGREGATORS, f"federation.aggregator must be one of {AGGREGATORS}"),
        (cfg.federation.supervision in ("unknown", "masked"),
         "federation.supervision must be unknown or masked"),
        (0 <= cfg.federation.unknown_value <= 1, "federation.unknown_value must lie in [0, 1]"),
        (cfg.refinement.min_component >= 1, "refinement.min_component must be >= 1"),
        (cfg.refinement.connectivity in (4, 8), "refinement.connectivity must be 4 or 8"),
        (cfg.eval.n_routes >= 1, "eval.n_routes must be >= 1"),
        (cfg.eval.threshold == "otsu" or isinstance(cfg.eval.threshold, (int, float)),
         "eval.threshold must be a number or 'otsu'"),
        (0 < cfg.meta.outer_step <= 1, "meta.outer_step must lie in (0, 1]"),
        (cfg.meta.inner_iters >= 1 and cfg.meta.tasks_per_meta_step >= 1,
         "meta.inner_iters and meta.tasks_per_meta_step must be >= 1"),
        (cfg.meta.meta_iterations >= 0, "meta.meta_iterations must be >= 0"),
        (cfg.meta.inner_lr > 0, "meta.inner_lr must be > 0"),
        (cfg.meta.map_size >= 32 and cfg.meta.maps_per_kind >= 1, "meta corpus sizes too small"),
        (cfg.training.pretrain_iters >= 0 and cfg.training.pretrain_size >= 1,
         "training.pretrain_iters must be >= 0 and pretrain_size >= 1"),
        (cfg.data.map_size >= 64 and cfg.data.map_size % 2 == 0, "data.map_size must be even and >= 64"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ConfigError(msg)


def _coerce(tp, value, where: str):
    """Check ``value`` against annotation ``tp`` (JSON-level types only)."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping")
        return _build(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        for a in sorted(args, key=lambda a: a is str):
            try:
                return _coerce(a, value, where)
            except ConfigError:
                pass
        raise ConfigError(f"{where}: {value!r} matches none of {args}")
    if tp is type(None):
        if value is not None:
            raise ConfigError(f"{where}: expected null")
        return None
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        return tuple(_coerce(args[0], v, f"{where}[{i}]") for i, v in enumerate(value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, str):
            # YAML 1.1 reads exponent forms such as 1e-4 as strings
            try:
                value = float(value)
            except ValueError:
                raise ConfigError(f"{where}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{where}: unsupported type {tp}")


def _build(cls, data: dict, where: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        prefix = f"{where}." if where else ""
        raise ConfigError(f"unknown key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        kwargs[key] = _coerce(hints[key], value, path)
    return cls(**kwargs)


def from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    """Read ``.json``, ``.yaml`` or ``.yml``; an empty file gives the defaults."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        data = json.loads(text) if text.strip() else {}
    elif path.suffix in (".yaml", ".yml"):
        data = yaml.safe_load(text) or {}
    else:
        raise ConfigError(f"unsupported config extension {path.suffix!r}")
    return from_dict(data)


def apply_overrides(cfg: ExperimentConfig, items: list[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars."""
    data = cfg.to_dict()
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown key: {key}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown key: {key}")
        node[parts[-1]] = yaml.safe_load(raw)
    return from_dict(data)
