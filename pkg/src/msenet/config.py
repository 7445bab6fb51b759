"""Run configuration: nested dataclasses, YAML I/O and dotted overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .data import EpisodeSpec
from .errors import ConfigError
from .head import DEFAULT_WEIGHT_INIT

DATA_ROOT_ENV = "MSENET_DATA_ROOT"
BACKBONES = ("residual18", "tiny")
DISTANCES = ("euclidean", "squared")


@dataclass
class DataConfig:
    root: str | None = None
    split_file: str | None = None
    split_counts: list[int] = field(default_factory=lambda: [64, 16, 20])
    normalization: str = "imagenet"

    def resolved_root(self) -> Path:
        root = self.root or os.environ.get(DATA_ROOT_ENV)
        if not root:
            raise ConfigError(f"data.root is not set and ${DATA_ROOT_ENV} is empty")
        return Path(root)


@dataclass
class TaskConfig:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 15

    def spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.n_query)


@dataclass
class ModelConfig:
    backbone: str = "residual18"
    pretrained: str | None = None
    channel_plan: list[int] = field(default_factory=lambda: [8, 16, 32, 64, 64])
    reduction: int = 8
    gamma_init: float = 0.2
    w_init: list[float] = field(default_factory=lambda: list(DEFAULT_WEIGHT_INIT))
    distance: str = "euclidean"
    multiscale: bool = True
    learnable_weight: bool = True
    self_attention: bool = True
    freeze_gamma: bool = False
    split_gamma: bool = False


@dataclass
class OptimConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train_task: TaskConfig = field(default_factory=lambda: TaskConfig(30, 5, 15))
    eval_task: TaskConfig = field(default_factory=TaskConfig)
    total_episodes: int = 10_000
    eval_interval: int = 250
    val_episodes: int = 200
    test_episodes: int = 600
    seed: int = 0

    def validate(self) -> "RunConfig":
        m = self.model
        if not self.optim.lr > 0:
            raise ConfigError(f"optim.lr must be positive, got {self.optim.lr}")
        if self.total_episodes < 1:
            raise ConfigError(f"total_episodes must be >= 1, got {self.total_episodes}")
        if m.backbone not in BACKBONES:
            raise ConfigError(f"model.backbone must be one of {BACKBONES}, got {m.backbone!r}")
        if m.distance not in DISTANCES:
            raise ConfigError(f"model.distance must be one of {DISTANCES}, got {m.distance!r}")
        if len(m.w_init) != 5:
            raise ConfigError(f"model.w_init needs 5 values, got {len(m.w_init)}")
        if len(m.channel_plan) != 5:
            raise ConfigError(f"model.channel_plan needs 5 values, got {len(m.channel_plan)}")
        if m.reduction < 1:
            raise ConfigError("model.reduction must be >= 1")
        if len(self.data.split_counts) != 3:
            raise ConfigError("data.split_counts needs 3 values (train, val, test)")
        for name in ("train_task", "eval_task"):
            try:
                getattr(self, name).spec()
            except ValueError as e:
                raise ConfigError(f"{name}: {e}") from e
        if self.eval_interval < 1 or self.val_episodes < 0 or self.test_episodes < 1:
            raise ConfigError("eval_interval and test_episodes must be >= 1, val_episodes >= 0")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **changes) -> "RunConfig":
        """Copy with dotted-key changes, e.g. ``replace(**{"model.gamma_init": 0.3})``."""
        return apply_overrides(self, [f"{k}={json.dumps(v)}" for k, v in changes.items()])


def _from_dict(cls, data: dict, prefix: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"expected a mapping at {prefix or '<root>'}, got {type(data).__name__}")
    kwargs = {}
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {prefix}{key}")
        default = known[key].default_factory() if known[key].default_factory is not dataclasses.MISSING else None
        if dataclasses.is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value or {}, f"{prefix}{key}.")
        else:
            if default is None and known[key].default is not dataclasses.MISSING:
                default = known[key].default
            kwargs[key] = _coerce(default, value, prefix + key)
    return cls(**kwargs)


def _coerce(default, value, key: str):
    """Match ``value`` to the type of the field default (YAML reads ``1e-4`` as a string)."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise TypeError
            return value
        if isinstance(default, float):
            if isinstance(value, bool):
                raise TypeError
            return float(value)
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(float(value)):
                raise TypeError
            return int(float(value))
        if isinstance(default, list):
            if not isinstance(value, (list, tuple)):
                raise TypeError
            return [_coerce(default[0], v, key) if default else v for v in value]
        if default is None and value is not None:
            return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r}") from None
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"bad value for {key}: {value!r}")
    return value


def from_dict(data: dict) -> RunConfig:
    return _from_dict(RunConfig, data or {}).validate()


def load_config(path) -> RunConfig:
    with open(path) as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
    return from_dict(data or {})


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply ``key.sub=value`` strings; values are parsed as YAML scalars/lists."""
    data = config.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for i, part in enumerate(parts):
            if not isinstance(node, dict) or part not in node:
                raise ConfigError(f"unknown config key: {key.strip()}")
            if i == len(parts) - 1:
                try:
                    node[part] = yaml.safe_load(raw)
                except yaml.YAMLError as e:
                    raise ConfigError(f"cannot parse value for {key}: {e}") from e
            else:
                node = node[part]
    return from_dict(data)


def desk_config(root=None, **overrides) -> RunConfig:
    """Small configuration that trains the tiny backbone on a synthetic dataset."""
    config = RunConfig(
        data=DataConfig(root=str(root) if root else None, split_counts=[25, 0, 5], normalization="synthetic"),
        model=ModelConfig(backbone="tiny"),
        optim=OptimConfig(lr=1e-3),
        train_task=TaskConfig(5, 5, 5),
        eval_task=TaskConfig(5, 1, 15),
        total_episodes=500,
        eval_interval=100,
        val_episodes=50,
        test_episodes=200,
    )
    return config.replace(**overrides) if overrides else config.validate()
