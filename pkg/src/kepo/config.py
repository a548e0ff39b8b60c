"""YAML experiment configs: strict parsing, validation and resolved echo."""
from __future__ import annotations

import dataclasses
import logging
import math
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from . import env
from .objective import ObjectiveConfig
from .rollout import RolloutConfig
from .trainer import METHODS, TrainConfig

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key."""


@dataclass(frozen=True)
class TaskConfig:
    seed: int = 0
    n_train: int = 640
    n_eval_per_split: int = 100
    n_ood_splits: int = 2
    cliff_mode: bool = True
    corrupted: bool = False

    def __post_init__(self):
        # make_task_set performs the same checks; failing here keeps errors field-level
        if self.n_train < 1:
            raise ValueError("n_train must be >= 1")
        if self.n_eval_per_split < 1:
            raise ValueError("n_eval_per_split must be >= 1")
        if not 1 <= self.n_ood_splits <= env.MAX_OOD_SPLITS:
            raise ValueError(f"n_ood_splits must lie in [1, {env.MAX_OOD_SPLITS}]")
        if self.corrupted and not self.cliff_mode:
            raise ValueError("corrupted requires cliff_mode")

    def build(self) -> env.TaskSet:
        return env.make_task_set(self.seed, self.n_train, self.n_eval_per_split,
                                 self.n_ood_splits, self.cliff_mode, self.corrupted)


@dataclass(frozen=True)
class TrainSection:
    seed: int = 0
    lr: float = 0.05
    epochs: int = 5
    groups_per_step: int = 16
    steps: Optional[int] = None
    eval_every: int = 10
    eval_episodes: int = 1
    teacher_strength: float = 5.0
    hint_follow: float = 5.0
    format_prior: float = 0.0
    offline_per_context: int = 2
    trace: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    method: str
    task: TaskConfig = field(default_factory=TaskConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    train: TrainSection = field(default_factory=TrainSection)
    output_dir: str = "runs/out"

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(
            method=self.method, seed=t.seed, rollout=self.rollout, objective=self.objective,
            lr=t.lr, epochs=t.epochs, groups_per_step=t.groups_per_step, steps=t.steps,
            eval_every=t.eval_every, eval_episodes=t.eval_episodes,
            teacher_strength=t.teacher_strength, hint_follow=t.hint_follow,
            format_prior=t.format_prior, offline_per_context=t.offline_per_context,
        )

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, train=dataclasses.replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "output_dir": self.output_dir,
            "task": dataclasses.asdict(self.task),
            "rollout": dataclasses.asdict(self.rollout),
            "objective": dataclasses.asdict(self.objective),
            "train": dataclasses.asdict(self.train),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False, default_flow_style=False)


_SECTIONS = {"task": TaskConfig, "rollout": RolloutConfig, "objective": ObjectiveConfig,
             "train": TrainSection}


def _coerce(path: str, value: Any, hint: Any) -> Any:
    if typing.get_origin(hint) is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if value is None:
            return None
        return _coerce(path, value, args[0])
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        if math.isnan(value):
            raise ConfigError(f"{path}: NaN is not allowed")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise TypeError(f"unsupported config type {hint!r} at {path}")


def _build_section(name: str, cls: type, raw: Any) -> Any:
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown key '{name}.{key}'")
    kwargs = {k: _coerce(f"{name}.{k}", v, hints[k]) for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def parse_config(raw: Any) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping at top level")
    allowed = {"method", "output_dir", *_SECTIONS}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}'")
    if "method" not in raw:
        raise ConfigError("missing required key 'method'")
    method = _coerce("method", raw["method"], str)
    if method not in METHODS:
        raise ConfigError(f"method: must be one of {', '.join(METHODS)}, got {method!r}")
    sections = {name: _build_section(name, cls, raw.get(name)) for name, cls in _SECTIONS.items()}
    rollout = sections["rollout"]
    if method == "kepo-ke" and rollout.hint_enabled:
        if (raw.get("rollout") or {}).get("hint_enabled") is True:
            log.warning("kepo-ke ignores rollout.hint_enabled=true")
        rollout = dataclasses.replace(rollout, hint_enabled=False)
    if method in ("grpo", "gkd") and rollout.hint_enabled:
        # hints need the kepo machinery; echo what actually runs
        rollout = dataclasses.replace(rollout, hint_enabled=False)
    output_dir = _coerce("output_dir", raw.get("output_dir", "runs/out"), str)
    return ExperimentConfig(method, sections["task"], rollout, sections["objective"],
                            sections["train"], output_dir)


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: malformed YAML: {exc}") from exc
    return parse_config(raw)
