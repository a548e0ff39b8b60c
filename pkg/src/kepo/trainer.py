"""Seeded training loop with periodic ID/OOD checkpoints."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from . import env
from .objective import (
    BatchGradient,
    ObjectiveConfig,
    gkd_batch_gradient,
    grpo_batch_gradient,
    kepo_batch_gradient,
)
from .policy import (
    DivergenceError,
    Label,
    PolicySnapshot,
    Trajectory,
    greedy_decode,
    make_base_policy,
    make_teacher,
    sample_trajectory,
)
from .rollout import RolloutConfig, RolloutGroup, knowledge_enhanced_rollout

log = logging.getLogger(__name__)

METHODS = ("grpo", "gkd", "kepo", "kepo-ke")

# stream tags for SeedSequence spawning; fixed so runs stay reproducible
_SHUFFLE, _ROLLOUT, _EVAL, _OFFLINE, _GKD = range(1, 6)


@dataclass(frozen=True)
class TrainConfig:
    method: str = "kepo"
    seed: int = 0
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    lr: float = 0.05
    epochs: int = 5
    groups_per_step: int = 16
    steps: Optional[int] = None  # overrides epochs when set
    eval_every: int = 10
    eval_episodes: int = 1
    teacher_strength: float = 5.0
    hint_follow: float = 5.0
    format_prior: float = 0.0
    offline_per_context: int = 2

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1 or self.groups_per_step < 1 or self.eval_every < 1:
            raise ValueError("epochs, groups_per_step and eval_every must be >= 1")
        if self.steps is not None and self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.teacher_strength <= 0:
            raise ValueError("teacher_strength must be > 0")

    @property
    def hints_active(self) -> bool:
        return self.method == "kepo" and self.rollout.hint_enabled

    def n_steps(self, n_train: int) -> int:
        if self.steps is not None:
            return self.steps
        return self.epochs * max(1, n_train // self.groups_per_step)


@dataclass
class RunMetrics:
    steps: list[dict] = field(default_factory=list)
    checkpoints: list[dict] = field(default_factory=list)

    def steps_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.steps)

    def checkpoint_csv(self) -> str:
        if not self.checkpoints:
            return ""
        split_cols = sorted(k for k in self.checkpoints[0]["ood_accuracy_per_split"])
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "id_accuracy", *[f"{s}_accuracy" for s in split_cols], "ood_accuracy_mean"])
        for c in self.checkpoints:
            w.writerow([c["step"], repr(c["id_accuracy"]),
                        *[repr(c["ood_accuracy_per_split"][s]) for s in split_cols],
                        repr(c["ood_accuracy_mean"])])
        return buf.getvalue()

    def step(self, s: int) -> dict:
        return self.steps[s]


@dataclass
class RunResult:
    metrics: RunMetrics
    policy: PolicySnapshot
    trace: list[dict] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_metrics: Optional[dict], cause: Exception):
        super().__init__(f"training diverged at step {step}: {cause}")
        self.step = step
        self.last_metrics = last_metrics


def _rng(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(key)))


def evaluate(snapshot: PolicySnapshot, eval_splits: Mapping[str, Sequence[env.Context]],
             episodes_per_context: int, rng: np.random.Generator) -> dict[str, float]:
    """Greedy-decoding accuracy per split."""
    if snapshot.label is Label.CURRENT:
        snapshot = snapshot.frozen(Label.OLD)
    out = {}
    for name, ctxs in eval_splits.items():
        hits = total = 0
        for ctx in ctxs:
            for _ in range(episodes_per_context):
                toks = greedy_decode(snapshot, ctx, rng)
                hits += env.score_trajectory(ctx, toks).accuracy
                total += 1
        out[name] = hits / total if total else 0.0
    return out


def _checkpoint(step: int, acc: dict[str, float]) -> dict:
    ood = {k: v for k, v in acc.items() if k != "ID"}
    return {
        "step": step,
        "id_accuracy": acc.get("ID", 0.0),
        "ood_accuracy_per_split": ood,
        "ood_accuracy_mean": float(np.mean(list(ood.values()))) if ood else 0.0,
    }


def _step_record(step: int, groups: list[RolloutGroup], bg: BatchGradient) -> dict:
    n = len(groups)
    on_policy = [r for g in groups for r in g.on_policy_rewards]
    triggered = sum(g.triggered for g in groups)
    return {
        "step": step,
        "mean_reward": float(np.mean(on_policy)),
        "reward_positive_group_fraction": sum(g.reward_positive for g in groups) / n,
        "triggered_fraction": triggered / n,
        "discarded_fraction": sum(g.discarded for g in groups) / n,
        "triggered_count": triggered,
        "untriggered_count": n - triggered,
        "group_count": n,
        "injected_count": sum(g.injected_count for g in groups),
        "attempts_used": sum(g.attempts_used for g in groups),
        "leaked_count": sum(g.leaked for g in groups),
        "gated_eligible": sum(len(g.trajectories) for g in groups if not g.discarded),
        **bg.metrics(),
    }


def _batches(n_train: int, per_step: int, n_steps: int, seed: int) -> Iterable[np.ndarray]:
    rng = _rng(seed, _SHUFFLE)
    order = np.empty(0, dtype=np.int64)
    for _ in range(n_steps):
        while len(order) < per_step:
            order = np.concatenate([order, rng.permutation(n_train)])
        yield order[:per_step]
        order = order[per_step:]


def _offline_dataset(teacher: PolicySnapshot, contexts: Sequence[env.Context], k: int,
                     seed: int) -> dict[env.Context, list[Trajectory]]:
    rng = _rng(seed, _OFFLINE)
    return {ctx: [sample_trajectory(teacher, ctx, rng) for _ in range(k)] for ctx in contexts}


def train_run(task_set: env.TaskSet, cfg: TrainConfig,
              on_step: Optional[Callable[[dict], None]] = None,
              trace: bool = False) -> RunResult:
    method = cfg.method
    rollout_cfg = cfg.rollout
    if method != "kepo" and rollout_cfg.hint_enabled:
        rollout_cfg = RolloutConfig(rollout_cfg.G, rollout_cfg.B, rollout_cfg.m, hint_enabled=False)
    needs_teacher = method in ("gkd", "kepo", "kepo-ke")
    teacher = make_teacher(task_set, cfg.teacher_strength) if needs_teacher else None

    current = make_base_policy(hint_follow=cfg.hint_follow, format_prior=cfg.format_prior)
    ref = current.frozen(Label.REFERENCE)
    offline = (_offline_dataset(teacher, task_set.train_contexts, cfg.offline_per_context, cfg.seed)
               if method == "gkd" and cfg.objective.lam < 1.0 else {})

    n_steps = cfg.n_steps(len(task_set.train_contexts))
    metrics = RunMetrics()
    trace_records: list[dict] = []

    def checkpoint(step: int) -> None:
        acc = evaluate(current, task_set.eval_splits, cfg.eval_episodes, _rng(cfg.seed, _EVAL, step))
        metrics.checkpoints.append(_checkpoint(step, acc))

    checkpoint(0)
    for step, batch in enumerate(_batches(len(task_set.train_contexts), cfg.groups_per_step,
                                          n_steps, cfg.seed)):
        old = current.frozen(Label.OLD)
        try:
            groups = [
                knowledge_enhanced_rollout(old, teacher, task_set.train_contexts[ci], rollout_cfg,
                                           _rng(cfg.seed, _ROLLOUT, step, j))
                for j, ci in enumerate(batch)
            ]
            for _ in range(cfg.objective.inner_epochs):
                if method == "grpo":
                    bg = grpo_batch_gradient(groups, current, ref, cfg.objective, old)
                elif method == "gkd":
                    bg = gkd_batch_gradient(groups, offline, current, teacher, cfg.objective.lam,
                                            _rng(cfg.seed, _GKD, step), cfg.objective.alpha)
                else:
                    bg = kepo_batch_gradient(groups, current, old, ref, teacher, cfg.objective)
                current.weights += cfg.lr * bg.grad
                if not np.all(np.isfinite(current.weights)):
                    raise DivergenceError("non-finite weights after update")
        except FloatingPointError as exc:  # DivergenceError or non-finite logits
            raise TrainingDiverged(step, metrics.steps[-1] if metrics.steps else None, exc) from exc
        rec = _step_record(step, groups, bg)
        metrics.steps.append(rec)
        if trace:
            trace_records += [dict(g.to_record(int(ci)), step=step) for g, ci in zip(groups, batch)]
        if on_step is not None:
            on_step(rec)
        done = step + 1
        if done % cfg.eval_every == 0 or done == n_steps:
            checkpoint(done)
            log.debug("step %d: %s", done, metrics.checkpoints[-1])
    return RunResult(metrics, current, trace_records)
