"""Run configuration: one JSON document, overridable by dotted keys."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace

from .losses import LossFlags, LossSettings
from .model import ModelConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = "data"
    n_train: int = 500
    n_test: int = 100
    n_objects: tuple = (2, 2)
    noise: float = 0.05


@dataclass
class OptimConfig:
    name: str = "sgd_momentum"  # or "sgd"
    lr: float = 1e-2
    momentum: float = 0.9
    weight_decay: float = 0.0


@dataclass
class ScheduleConfig:
    epochs_to_one: int = 2
    inverted: bool = False


@dataclass
class Seeds:
    data: int = 0
    model: int = 0
    train: int = 0
    eval: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    flags: LossFlags = field(default_factory=LossFlags)
    loss: LossSettings = field(default_factory=LossSettings)
    seeds: Seeds = field(default_factory=Seeds)
    epochs: int = 6
    batch_size: int = 8
    out_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "RunConfig":
        try:
            self.model.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.optim.name not in ("sgd", "sgd_momentum"):
            raise ConfigError(f"unknown optimizer {self.optim.name!r}")
        if self.optim.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.flags.exclusion and not self.flags.composition:
            raise ConfigError("flags.exclusion requires flags.composition (shared map machinery)")
        if not 0 <= self.loss.layer < self.model.n_cross_layers:
            raise ConfigError(f"loss.layer={self.loss.layer} outside 0..{self.model.n_cross_layers - 1}")
        h = self.loss.head
        if h != "mean" and not (isinstance(h, int) and 0 <= h < self.model.n_heads):
            raise ConfigError(f"loss.head must be 'mean' or a head index, got {h!r}")
        lo, hi = self.data.n_objects
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad data.n_objects {self.data.n_objects}")
        return self


def _build(cls, d, path=""):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    names = {f.name: f for f in fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown config keys under {path or 'root'}: {sorted(unknown)}")
    kw = {}
    defaults = cls()
    for k, v in d.items():
        cur = getattr(defaults, k)
        if is_dataclass(cur):
            kw[k] = _build(type(cur), v, f"{path}{k}.")
        elif isinstance(cur, tuple):
            kw[k] = tuple(v)
        else:
            kw[k] = v
    return cls(**kw)


def from_dict(d: dict) -> RunConfig:
    try:
        return _build(RunConfig, d).validate()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(d)


def parse_value(text: str):
    """JSON literal if it parses (numbers, booleans, lists), else the raw string."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    """Set dotted keys, e.g. ``{"optim.lr": 0.05, "flags.subject": False}``."""
    d = cfg.to_dict()
    for key, value in overrides.items():
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown config key {key!r}")
            node = node[p]
        if parts[-1] not in node:
            raise ConfigError(f"unknown config key {key!r}")
        node[parts[-1]] = value
    return from_dict(d)


def apply_env(cfg: RunConfig, environ=None) -> RunConfig:
    """``HIST_SEED`` replaces every seed (data, model, training, eval)."""
    environ = os.environ if environ is None else environ
    raw = environ.get("HIST_SEED")
    if raw is None or raw == "":
        return cfg
    try:
        s = int(raw)
    except ValueError as exc:
        raise ConfigError(f"HIST_SEED must be an integer, got {raw!r}") from exc
    return with_seed(cfg, s)


def with_seed(cfg: RunConfig, s: int) -> RunConfig:
    return replace(cfg, seeds=Seeds(s, s, s, s))
