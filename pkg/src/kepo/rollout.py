"""Group rollouts and the adaptive knowledge-enhanced rollout.

``knowledge_enhanced_rollout`` follows the adaptive procedure step by step:
sample a group; if no member earns reward, ask the teacher for a hint given
the ground-truth answer, rejection-sample hint-conditioned responses within a
budget, and inject the accepted ones next to a random subset of the on-policy
group so that the group keeps exactly G members. Groups where every attempt
fails are discarded.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import env
from .policy import (
    Label,
    PolicySnapshot,
    Provenance,
    Trajectory,
    sample_trajectory,
    token_distribution,
    trajectory_logprob,
)


@dataclass(frozen=True)
class RolloutConfig:
    G: int = 8
    B: int = 8
    m: int = 1
    hint_enabled: bool = True

    def __post_init__(self):
        if self.G < 2:
            raise ValueError("G must be >= 2")
        if self.B < 1:
            raise ValueError("B must be >= 1")
        if not 1 <= self.m < self.G:
            raise ValueError("m must satisfy 1 <= m < G")


@dataclass
class RolloutGroup:
    context: env.Context
    trajectories: list[Trajectory]
    triggered: bool = False
    hint_used: Optional[int] = None
    injected_count: int = 0
    attempts_used: int = 0
    # rewards of the G on-policy samples, before any injection
    on_policy_rewards: list[int] = field(default_factory=list)

    @property
    def discarded(self) -> bool:
        return self.triggered and not self.trajectories

    @property
    def rewards(self) -> list[int]:
        return [t.reward.total for t in self.trajectories]

    @property
    def reward_positive(self) -> bool:
        return max(self.on_policy_rewards, default=0) > 0

    @property
    def leaked(self) -> int:
        """Injected trajectories that emit a hint symbol themselves."""
        return sum(
            1 for t in self.trajectories
            if t.provenance is Provenance.HINT_INJECTED and any(env.is_hint(x) for x in t.tokens)
        )

    def to_record(self, index: int) -> dict:
        return {
            "context_index": index,
            "rewards": self.rewards,
            "on_policy_rewards": list(self.on_policy_rewards),
            "triggered": self.triggered,
            "discarded": self.discarded,
            "attempts_used": self.attempts_used,
            "hint": self.hint_used,
            "provenance": [t.provenance.value for t in self.trajectories],
        }


def standard_group_rollout(policy_old: PolicySnapshot, ctx: env.Context, G: int,
                           rng: np.random.Generator) -> list[Trajectory]:
    if ctx.hint is not None or ctx.revealed_answer is not None:
        raise ValueError("standard rollouts take plain contexts")
    return [sample_trajectory(policy_old, ctx, rng) for _ in range(G)]


def generate_hint(teacher: PolicySnapshot, ctx: env.Context, answer: int,
                  rng: np.random.Generator) -> int:
    """Sample a hint symbol from the teacher's next-token distribution given the answer."""
    if teacher.label is not Label.TEACHER:
        raise ValueError("hints come from a TEACHER snapshot")
    probs = token_distribution(teacher, ctx.with_answer(answer), ())
    hint_probs = probs[env.HINT_BASE:env.END]
    cum = np.cumsum(hint_probs / hint_probs.sum())
    k = min(int(np.searchsorted(cum, rng.random(), side="right")), env.N_HINTS - 1)
    return env.hint_token(k)


def hint_rejection_sample(policy_old: PolicySnapshot, ctx: env.Context, hint: int, answer: int,
                          B: int, rng: np.random.Generator) -> tuple[Optional[Trajectory], int]:
    """First reward-positive hint-conditioned sample within ``B`` attempts, and attempts used."""
    if B < 1:
        raise ValueError("budget must be >= 1")
    plain = ctx.plain()
    hinted = plain.with_hint(hint, answer)
    for b in range(1, B + 1):
        traj = sample_trajectory(policy_old, hinted, rng, Provenance.HINT_INJECTED)
        if traj.reward.total > 0:
            traj.plain_logprob = trajectory_logprob(policy_old, plain, traj.tokens)
            return traj, b
    return None, B


def knowledge_enhanced_rollout(policy_old: PolicySnapshot, teacher: Optional[PolicySnapshot],
                               ctx: env.Context, cfg: RolloutConfig,
                               rng: np.random.Generator) -> RolloutGroup:
    trajs = standard_group_rollout(policy_old, ctx, cfg.G, rng)
    rewards = [t.reward.total for t in trajs]
    if not cfg.hint_enabled or max(rewards) > 0:
        return RolloutGroup(ctx, trajs, on_policy_rewards=rewards)
    if teacher is None:
        raise ValueError("hint-enabled rollout needs a teacher")
    answer = env.correct_letter(ctx)
    hint = generate_hint(teacher, ctx, answer, rng)
    accepted: list[Trajectory] = []
    attempts = 0
    for _ in range(cfg.m):
        traj, used = hint_rejection_sample(policy_old, ctx, hint, answer, cfg.B, rng)
        attempts += used
        if traj is not None:
            accepted.append(traj)
    group = RolloutGroup(ctx, [], triggered=True, hint_used=hint, attempts_used=attempts,
                         on_policy_rewards=rewards)
    if not accepted:
        return group
    keep = np.sort(rng.choice(cfg.G, size=cfg.G - len(accepted), replace=False))
    group.trajectories = [trajs[i] for i in keep] + accepted
    group.injected_count = len(accepted)
    return group
