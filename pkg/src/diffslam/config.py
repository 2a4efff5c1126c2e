"""Experiment configuration: strict JSON parsing, presets and dotted overrides."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .geometry import Pose
from .losses import LossConfig
from .registration import SoftLMConfig
from .tasks import POLE_SENSOR, STREET_SENSOR, TASKS, TaskDataset, TrainSchedule, default_world_kind, make_task_dataset


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field."""


WORLD_KINDS = ("auto", "street", "pole")


@dataclass
class SensorOverrides:
    """Sensor fields left as None keep the world's default sensor."""

    beams: Optional[int] = None
    azimuth_steps: Optional[int] = None
    vertical_fov: Optional[tuple[float, float]] = None
    max_range: Optional[float] = None
    range_noise_sigma: Optional[float] = None
    dropout_prob: Optional[float] = None


@dataclass
class WorldConfig:
    """Recipe for a synthetic sequence (the world itself is generated from it)."""

    kind: str = "auto"  # auto: street for elevation, pole for displacement
    seed: int = 0
    n_frames: int = 60
    n_train: int = 45
    n_dynamic: int = 2
    sensor: SensorOverrides = field(default_factory=SensorOverrides)

    def __post_init__(self):
        if self.kind not in WORLD_KINDS:
            raise ValueError(f"kind must be one of {WORLD_KINDS}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if not 2 <= self.n_train <= self.n_frames:
            raise ValueError("n_train must lie in [2, n_frames]")
        if self.n_dynamic < 0:
            raise ValueError("n_dynamic must be >= 0")

    def resolved_kind(self, task: str) -> str:
        if self.kind != "auto":
            return self.kind
        return default_world_kind(task)


@dataclass
class ExperimentConfig:
    task: str = "elevation"
    world: WorldConfig = field(default_factory=WorldConfig)
    registration: SoftLMConfig = field(default_factory=SoftLMConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"must be one of {TASKS}")


PRESETS: dict[str, dict] = {
    "desk": {"task": "elevation", "schedule": {"epochs": 40, "warmup": 5, "k": 2}},
    "paper-gndnet": {"task": "elevation", "schedule": {"epochs": 150, "warmup": 15, "k": 5}},
    "paper-dslr": {"task": "displacement", "schedule": {"epochs": 50, "warmup": 15, "k": 5, "learning_rate": 0.01}},
    "paper-ae": {"task": "displacement", "schedule": {"epochs": 50, "warmup": 15, "k": 10, "learning_rate": 0.01}},
}


# -- strict (de)serialisation ---------------------------------------------------

def _pose_from(value, path: str) -> Pose:
    try:
        return Pose.from_matrix(value)
    except Exception as exc:
        raise ConfigError(f"{path}: expected a 4x4 pose matrix ({exc})") from None


def _convert(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _convert(inner, value, path)
    if tp is Pose:
        return _pose_from(value, path)
    if dataclasses.is_dataclass(tp):
        return from_dict(tp, value, path)
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} numbers")
        return tuple(_convert(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def from_dict(cls, data, path: str = ""):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path + '.' if path else ''}{unknown[0]}: unknown config key")
    kwargs = {k: _convert(hints[k], v, f"{path + '.' if path else ''}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from None


def to_dict(obj) -> Any:
    if isinstance(obj, Pose):
        return obj.matrix().tolist()
    if dataclasses.is_dataclass(obj):
        return {f.name: to_dict(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [to_dict(v) for v in obj]
    return obj


def _merge(base: dict, update: dict) -> dict:
    out = dict(base)
    for k, v in update.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _set_dotted(tree: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{dotted}: {k} is not a section")
    node[keys[-1]] = value


def parse_value(text: str):
    """Override values are JSON when they parse as JSON, else plain strings."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: Optional[str] = None, preset: Optional[str] = None,
                overrides: Optional[dict[str, Any]] = None) -> ExperimentConfig:
    tree: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"preset: unknown preset {preset!r} (choose from {sorted(PRESETS)})")
        tree = _merge(tree, PRESETS[preset])
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            data = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: not valid JSON ({exc})") from None
        tree = _merge(tree, data)
    for k, v in (overrides or {}).items():
        _set_dotted(tree, k, v)
    return from_dict(ExperimentConfig, tree)


def build_dataset(cfg: ExperimentConfig) -> TaskDataset:
    w = cfg.world
    kind = w.resolved_kind(cfg.task)
    sensor_kw = {k: v for k, v in dataclasses.asdict(w.sensor).items() if v is not None}
    sensor = None
    if sensor_kw:
        base = STREET_SENSOR if kind == "street" else POLE_SENSOR
        sensor = dataclasses.replace(base, **sensor_kw)
    return make_task_dataset(cfg.task, w.seed, w.n_frames, w.n_train, w.n_dynamic, sensor=sensor, world_kind=kind)
