"""Run configuration: one YAML file covering data, model, loss and training.

Every field has a default, so an empty file (or no file) is a valid
configuration.  Unknown keys are rejected with their dotted paths, and type
errors are collected across the whole document before reporting.  Overrides
use the same dotted paths (``train.roi_factor=2``), with values parsed as
YAML scalars.
"""

from __future__ import annotations

import dataclasses
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_args, get_origin, get_type_hints

import yaml

from .losses import LossConfig
from .phantom import OrganDef, PhantomSpec, default_phantom_spec
from .snet import SNetConfig
from .training import StageSchedule, TrainConfig


class ConfigError(ValueError):
    """Schema violation: unknown key, wrong type, or malformed document."""


def _default_organs() -> tuple[OrganDef, ...]:
    return default_phantom_spec().organs


@dataclass(frozen=True)
class PhantomSection:
    volume_shape: tuple[int, int, int] = (96, 96, 96)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    organs: tuple[OrganDef, ...] = field(default_factory=_default_organs)
    noise_sigma: float = 0.05
    background_mean: float = 0.0
    seed: int = 0
    count: int = 50
    small_threshold: float = 1000.0


@dataclass(frozen=True)
class SNetSection:
    """Backbone knobs; the class count comes from the organ list."""

    in_channels: int = 1
    base_width: int = 24
    width_multiplier: float = 1.0
    num_downsamples: int = 1
    blocks_per_stage: int = 2
    aspp_rates: tuple[int, ...] = (3, 6, 12, 18)
    se_reduction: int = 4


@dataclass(frozen=True)
class TrainSection:
    stage1: StageSchedule = StageSchedule(60, 1e-3)
    stage2: StageSchedule = StageSchedule(40, 1e-3)
    stage3: StageSchedule = StageSchedule(40, 1e-3)
    stage4: StageSchedule = StageSchedule(40, 1e-4)
    roi_factor: float = 3.0
    sol_sigma: Optional[float] = None
    sol_width: Optional[int] = None
    sos_width: int = 24
    presence_threshold: float = 0.1
    fusion_threshold: float = 0.5
    jitter_fraction: float = 0.1
    val_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class MetricsSection:
    case_table: str = "cases.csv"
    aggregate_table: str = "aggregate.csv"
    compare_table: str = "compare.csv"


@dataclass(frozen=True)
class RunConfig:
    phantom: PhantomSection = field(default_factory=PhantomSection)
    snet: SNetSection = field(default_factory=SNetSection)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainSection = field(default_factory=TrainSection)
    metrics: MetricsSection = field(default_factory=MetricsSection)


# ---------------------------------------------------------------------------
# Mapping -> dataclass with path-aware errors
# ---------------------------------------------------------------------------

def _convert(tp, value, path: str, errors: list[str]):
    origin = get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, Mapping):
            errors.append(f"{path}: expected a mapping, got {type(value).__name__}")
            return None
        return _build(tp, value, path, errors)
    if origin is Union:  # Optional[...]
        if value is None:
            return None
        inner = [a for a in get_args(tp) if a is not type(None)]
        return _convert(inner[0], value, path, errors)
    if origin is tuple:
        if isinstance(value, (str, bytes)) or not isinstance(value, Sequence):
            errors.append(f"{path}: expected a sequence, got {type(value).__name__}")
            return None
        args = get_args(tp)
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(
                _convert(args[0], v, f"{path}[{i}]", errors)
                for i, v in enumerate(value)
            )
        if len(value) != len(args):
            errors.append(f"{path}: expected {len(args)} entries, got {len(value)}")
            return None
        return tuple(
            _convert(a, v, f"{path}[{i}]", errors)
            for i, (a, v) in enumerate(zip(args, value))
        )
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {type(value).__name__}")
            return None
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {type(value).__name__}")
            return None
        return value
    if tp is bool:
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean, got {type(value).__name__}")
            return None
        return value
    if tp is str:
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {type(value).__name__}")
            return None
        return value
    raise TypeError(f"unhandled config field type {tp!r} at {path}")


def _build(cls, data: Mapping, path: str, errors: list[str]):
    hints = get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key in data:
        dotted = f"{path}.{key}" if path else str(key)
        if key not in names:
            errors.append(f"{dotted}: unknown key")
            continue
        kwargs[key] = _convert(hints[key], data[key], dotted, errors)
    if errors:
        return None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        errors.append(f"{path or 'config'}: {exc}")
        return None


def config_from_mapping(data: Mapping) -> RunConfig:
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigError(f"config root must be a mapping, got {type(data).__name__}")
    errors: list[str] = []
    cfg = _build(RunConfig, data, "", errors)
    if errors:
        raise ConfigError("invalid config: " + "; ".join(errors))
    return cfg


def load_run_config(path) -> RunConfig:
    path = Path(path)
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from exc
    return config_from_mapping(data)


def _plain(value):
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def save_run_config(cfg: RunConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(_plain(dataclasses.asdict(cfg)), fh, sort_keys=True)


def apply_overrides(cfg: RunConfig, assignments: Sequence[str]) -> RunConfig:
    """Apply ``section.field=value`` assignments; values parse as YAML."""
    if not assignments:
        return cfg
    doc = dataclasses.asdict(cfg)
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form path=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.strip().split(".")
        if not all(keys):
            raise ConfigError(f"override {item!r} has an empty path segment")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"override {item!r}: bad value ({exc})") from exc
        node = doc
        for key in keys[:-1]:
            if not isinstance(node, dict) or key not in node:
                raise ConfigError(f"override {dotted!r}: no such config path")
            node = node[key]
        if not isinstance(node, dict) or keys[-1] not in node:
            raise ConfigError(f"override {dotted!r}: no such config path")
        node[keys[-1]] = value
    return config_from_mapping(doc)


# ---------------------------------------------------------------------------
# Builders for the working dataclasses
# ---------------------------------------------------------------------------

def phantom_spec(cfg: RunConfig) -> PhantomSpec:
    p = cfg.phantom
    return PhantomSpec(
        volume_shape=p.volume_shape,
        spacing=p.spacing,
        organs=p.organs,
        noise_sigma=p.noise_sigma,
        background_mean=p.background_mean,
        seed=p.seed,
    )


def num_classes(cfg: RunConfig) -> int:
    if not cfg.phantom.organs:
        raise ConfigError("phantom.organs must declare at least one organ")
    return max(o.class_id for o in cfg.phantom.organs) + 1


def snet_config(cfg: RunConfig) -> SNetConfig:
    s = cfg.snet
    return SNetConfig(
        num_classes=num_classes(cfg),
        in_channels=s.in_channels,
        base_width=s.base_width,
        width_multiplier=s.width_multiplier,
        num_downsamples=s.num_downsamples,
        blocks_per_stage=s.blocks_per_stage,
        aspp_rates=s.aspp_rates,
        se_reduction=s.se_reduction,
    )


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(
        snet=snet_config(cfg),
        stage1=t.stage1,
        stage2=t.stage2,
        stage3=t.stage3,
        stage4=t.stage4,
        loss=cfg.loss,
        roi_factor=t.roi_factor,
        sol_sigma=t.sol_sigma,
        sol_width=t.sol_width,
        sos_width=t.sos_width,
        presence_threshold=t.presence_threshold,
        fusion_threshold=t.fusion_threshold,
        jitter_fraction=t.jitter_fraction,
        val_fraction=t.val_fraction,
        seed=t.seed,
    )


def validate_run_config(cfg: RunConfig) -> None:
    """Build every derived object so value errors surface before any work."""
    try:
        phantom_spec(cfg)
        train_config(cfg)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
