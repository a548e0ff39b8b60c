"""Batch objectives and their analytic gradients (ascent direction)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from . import env
from .estimators import (
    advantages,
    clip_is_active,
    clipped_weight,
    distill_divergence,
    distill_gate,
    importance_weight,
    reference_kl,
)
from .policy import (
    DivergenceError,
    PolicySnapshot,
    Provenance,
    Trajectory,
    accumulate_logprob_grad,
    trajectory_logprob,
)
from .rollout import RolloutGroup

ESTIMATORS = ("grpo", "rloo")
RATIO_MODES = ("behavioral", "plain")
ADVANTAGE_POOLS = ("mixed", "on_policy")


@dataclass(frozen=True)
class ObjectiveConfig:
    estimator: str = "grpo"
    eps: float = 0.2
    beta: float = 0.04
    tau: float = 1.0
    alpha: float = 1.0
    gate_strict: bool = False
    lam: float = 1.0
    inner_epochs: int = 1
    # denominator of the importance ratio for injected trajectories:
    # "behavioral" = hint-conditioned sampling log-prob, "plain" = hint stripped
    ratio_mode: str = "behavioral"
    advantage_pool: str = "mixed"

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ValueError(f"estimator must be one of {ESTIMATORS}")
        if not 0.0 < self.eps < 1.0:
            raise ValueError("eps must lie in (0, 1)")
        if self.beta < 0 or self.alpha < 0:
            raise ValueError("beta and alpha must be >= 0")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.inner_epochs < 1:
            raise ValueError("inner_epochs must be >= 1")
        if self.ratio_mode not in RATIO_MODES:
            raise ValueError(f"ratio_mode must be one of {RATIO_MODES}")
        if self.advantage_pool not in ADVANTAGE_POOLS:
            raise ValueError(f"advantage_pool must be one of {ADVANTAGE_POOLS}")
        if math.isnan(self.tau):
            raise ValueError("tau is NaN")


@dataclass
class BatchGradient:
    grad: np.ndarray
    loss_terms: dict[str, float] = field(default_factory=dict)
    distilled_count: int = 0
    group_count: int = 0
    discarded_group_count: int = 0

    def metrics(self) -> dict:
        out = dict(self.loss_terms)
        out["distilled_count"] = self.distilled_count
        out["discarded_group_count"] = self.discarded_group_count
        return out


def group_advantages(group: RolloutGroup, kind: str, pool: str = "mixed") -> np.ndarray:
    rewards = np.array(group.rewards, dtype=np.float64)
    injected = np.array([t.provenance is Provenance.HINT_INJECTED for t in group.trajectories])
    if pool == "mixed" or not injected.any():
        return advantages(rewards, kind)
    # baseline from on-policy members only
    out = np.empty_like(rewards)
    on = rewards[~injected]
    out[~injected] = advantages(on, kind) if len(on) >= 2 else 0.0
    out[injected] = rewards[injected] - on.mean()
    return out


def _old_logprob(t: Trajectory, old: Optional[PolicySnapshot], mode: str) -> float:
    if t.provenance is Provenance.ON_POLICY or mode == "behavioral":
        return t.total_logprob
    if t.plain_logprob is None:
        if old is None:
            raise ValueError("plain ratio mode needs the old snapshot or a recorded plain log-prob")
        return trajectory_logprob(old, t.sampling_context.plain(), t.tokens)
    return t.plain_logprob


def _assemble(groups: Sequence[RolloutGroup], current: PolicySnapshot,
              old: Optional[PolicySnapshot], ref: Optional[PolicySnapshot],
              teacher: Optional[PolicySnapshot], cfg: ObjectiveConfig) -> BatchGradient:
    grad = np.zeros_like(current.weights, dtype=np.float64)
    pg_term = distill_term = kl_term = 0.0
    distilled = discarded = 0
    for gi, group in enumerate(groups):
        if group.discarded:
            discarded += 1
            continue
        if not group.trajectories:
            raise ValueError(f"group {gi} is empty")
        adv = group_advantages(group, cfg.estimator, cfg.advantage_pool)
        gate = (distill_gate(group.rewards, cfg.tau, cfg.gate_strict) if teacher is not None
                else np.zeros(len(adv), dtype=bool))
        n = len(group.trajectories)
        for i, t in enumerate(group.trajectories):
            ctx = t.sampling_context.plain()
            lp_new = trajectory_logprob(current, ctx, t.tokens)
            lp_old = _old_logprob(t, old, cfg.ratio_mode)
            try:
                ratio = importance_weight(lp_new, lp_old)
            except (ValueError, OverflowError) as exc:
                raise DivergenceError(f"group {gi} trajectory {i}: {exc}") from exc
            pg_term += clipped_weight(ratio, cfg.eps) * adv[i]
            if adv[i] != 0.0 and not clip_is_active(ratio, cfg.eps):
                accumulate_logprob_grad(current, ctx, t.tokens, grad, adv[i] * ratio)
            if gate[i] and cfg.alpha > 0:
                d = distill_divergence(teacher, current, ctx, t.tokens, grad, -cfg.alpha)
                if not math.isfinite(d):
                    raise DivergenceError(
                        f"group {gi} trajectory {i}: infinite distillation divergence "
                        f"on {env.render(t.tokens)}")
                distill_term += d
            distilled += int(gate[i])
            if cfg.beta > 0:
                if ref is None:
                    raise ValueError("beta > 0 needs a reference snapshot")
                kl = reference_kl(current, ref, ctx, t.tokens, grad, -cfg.beta / n)
                if not math.isfinite(kl):
                    raise DivergenceError(f"group {gi} trajectory {i}: infinite reference KL")
                kl_term += kl / n
        if not np.all(np.isfinite(grad)):
            raise DivergenceError(f"non-finite gradient after group {gi}")
    return BatchGradient(
        grad,
        {"pg_term": pg_term, "distill_term": distill_term, "ref_kl_term": kl_term},
        distilled_count=distilled,
        group_count=len(groups),
        discarded_group_count=discarded,
    )


def grpo_batch_gradient(groups: Sequence[RolloutGroup], current: PolicySnapshot,
                        ref: Optional[PolicySnapshot], cfg: ObjectiveConfig,
                        old: Optional[PolicySnapshot] = None) -> BatchGradient:
    """Gradient of sum_groups [sum_i w_i A_i - beta KL(current || ref)]; no distillation."""
    return _assemble(groups, current, old, ref, None, cfg)


def kepo_batch_gradient(groups: Sequence[RolloutGroup], current: PolicySnapshot,
                        old: Optional[PolicySnapshot], ref: Optional[PolicySnapshot],
                        teacher: PolicySnapshot, cfg: ObjectiveConfig) -> BatchGradient:
    """Policy-gradient term plus alpha-weighted, reward-gated distillation toward the teacher."""
    return _assemble(groups, current, old, ref, teacher, cfg)


def gkd_batch_gradient(on_policy_groups: Sequence[RolloutGroup],
                       offline_dataset: Mapping[env.Context, Sequence[Trajectory]] | Sequence[Trajectory],
                       current: PolicySnapshot, teacher: PolicySnapshot, lam: float,
                       rng: np.random.Generator, alpha: float = 1.0) -> BatchGradient:
    """Generalized KD: each batch slot distills on a student sample with probability
    ``lam``, otherwise on a teacher sample from ``offline_dataset``. No reward, no gate.

    ``offline_dataset`` is either a flat list of teacher trajectories or a map
    from context to teacher trajectories for that context.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must lie in [0, 1]")
    by_ctx = offline_dataset if isinstance(offline_dataset, Mapping) else None
    flat = ([t for ts in offline_dataset.values() for t in ts] if by_ctx is not None
            else list(offline_dataset))
    if lam < 1.0 and not flat:
        raise ValueError("offline dataset is empty")
    grad = np.zeros_like(current.weights, dtype=np.float64)
    distill_term = 0.0
    count = student_count = 0
    for gi, group in enumerate(on_policy_groups):
        for i, t in enumerate(group.trajectories):
            if rng.random() < lam:
                src = t
                student_count += 1
            else:
                pool = by_ctx.get(group.context.plain(), flat) if by_ctx is not None else flat
                src = pool[int(rng.integers(len(pool)))]
            ctx = src.sampling_context.plain()
            d = distill_divergence(teacher, current, ctx, src.tokens, grad, -alpha)
            if not math.isfinite(d):
                raise DivergenceError(f"group {gi} slot {i}: infinite distillation divergence")
            distill_term += d
            count += 1
    if not np.all(np.isfinite(grad)):
        raise DivergenceError("non-finite GKD gradient")
    return BatchGradient(
        grad,
        {"pg_term": 0.0, "distill_term": distill_term, "ref_kl_term": 0.0,
         "student_fraction": student_count / count if count else 0.0},
        distilled_count=count,
        group_count=len(on_policy_groups),
    )
