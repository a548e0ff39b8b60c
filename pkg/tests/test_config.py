import math
from pathlib import Path

import pytest
import yaml

from kepo.config import ConfigError, ExperimentConfig, load_config, parse_config

CONFIGS = sorted((Path(__file__).parent.parent / "configs").glob("*.yaml"))


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_shipped_configs_load(path):
    cfg = load_config(path)
    assert cfg.train.steps == 200
    cfg.train_config()


@pytest.mark.parametrize("path", CONFIGS, ids=lambda p: p.stem)
def test_resolved_echo_round_trips(path):
    cfg = load_config(path)
    again = parse_config(yaml.safe_load(cfg.to_yaml()))
    assert again == cfg
    assert again.to_yaml() == cfg.to_yaml()


def test_minimal_config_gets_defaults():
    cfg = parse_config({"method": "grpo"})
    assert cfg.rollout.G == 8 and cfg.objective.tau == 1.0 and cfg.train.lr == 0.05
    assert cfg.task.n_train == 640 and cfg.output_dir == "runs/out"


def test_negative_infinite_tau_from_yaml():
    cfg = parse_config(yaml.safe_load("method: kepo\nobjective:\n  tau: -.inf\n"))
    assert cfg.objective.tau == -math.inf


@pytest.mark.parametrize("raw,needle", [
    ({"method": "grpo", "colour": 1}, "unknown key 'colour'"),
    ({"method": "grpo", "train": {"learning_rate": 0.1}}, "unknown key 'train.learning_rate'"),
    ({"method": "grpo", "rollout": {"g": 8}}, "unknown key 'rollout.g'"),
    ({"method": "sft"}, "method"),
    ({"task": {}}, "missing required key 'method'"),
    ({"method": "grpo", "rollout": {"G": 1}}, "rollout"),
    ({"method": "grpo", "rollout": {"G": "8"}}, "rollout.G"),
    ({"method": "grpo", "train": {"steps": 2.5}}, "train.steps"),
    ({"method": "grpo", "task": {"cliff_mode": 1}}, "task.cliff_mode"),
    ({"method": "grpo", "objective": {"eps": 1.5}}, "objective"),
    ({"method": "grpo", "objective": {"tau": float("nan")}}, "objective.tau"),
    ({"method": "grpo", "task": {"n_ood_splits": 0}}, "task"),
    ({"method": "grpo", "task": {"corrupted": True, "cliff_mode": False}}, "task"),
    ({"method": "grpo", "train": []}, "train"),
    ([1, 2], "mapping"),
])
def test_invalid_configs_name_the_problem(raw, needle):
    with pytest.raises(ConfigError, match=needle.replace(".", r"\.")):
        parse_config(raw)


def test_train_section_errors_surface_at_build():
    # TrainConfig validation runs when the trainer config is assembled
    cfg = parse_config({"method": "grpo", "train": {"lr": -1.0}})
    with pytest.raises(ValueError):
        cfg.train_config()


@pytest.mark.parametrize("method", ["kepo-ke", "grpo", "gkd"])
def test_hints_forced_off_outside_kepo(method):
    cfg = parse_config({"method": method, "rollout": {"hint_enabled": True}})
    assert cfg.rollout.hint_enabled is False
    assert "hint_enabled: false" in cfg.to_yaml()


def test_kepo_keeps_hints():
    assert parse_config({"method": "kepo"}).rollout.hint_enabled is True


def test_malformed_yaml(tmp_path):
    p = tmp_path / "bad.yaml"
    p.write_text("method: [grpo\n")
    with pytest.raises(ConfigError, match="malformed"):
        load_config(p)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "nope.yaml")


def test_with_seed_only_touches_train_seed():
    cfg = parse_config({"method": "kepo", "task": {"seed": 3}})
    other = cfg.with_seed(9)
    assert other.train.seed == 9 and other.task.seed == 3
    assert isinstance(other, ExperimentConfig) and cfg.train.seed == 0
