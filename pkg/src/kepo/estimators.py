"""Numerical kernels for group-based policy optimization."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .env import Context
from .policy import PolicySnapshot, _as_tokens, _encoded


class DegenerateSupportError(ValueError):
    """An importance ratio touched a zero-probability sequence."""


def importance_weight(logp_new: float, logp_old: float) -> float:
    if math.isinf(logp_new) or math.isinf(logp_old) or math.isnan(logp_new) or math.isnan(logp_old):
        raise DegenerateSupportError(f"non-finite log-probs ({logp_new}, {logp_old})")
    try:
        return math.exp(logp_new - logp_old)
    except OverflowError as exc:
        raise OverflowError(f"importance ratio overflows: log ratio {logp_new - logp_old:.1f}") from exc


def clipped_weight(ratio: float, eps: float) -> float:
    return min(ratio, min(max(ratio, 1.0 - eps), 1.0 + eps))


def clip_is_active(ratio: float, eps: float) -> bool:
    """True when the min selects the clipped branch (no gradient through the ratio)."""
    return clipped_weight(ratio, eps) != ratio


def rloo_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    g = len(r)
    if g < 2:
        raise ValueError("leave-one-out baseline needs a group of at least 2")
    # r_i - (S - r_i)/(G-1) == (G r_i - S)/(G-1); centering first keeps the sum exact
    c = r - r.mean()
    return c * (g / (g - 1))


def grpo_advantages(rewards: Sequence[float]) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if len(r) < 1:
        raise ValueError("empty reward group")
    return r - r.mean()


def advantages(rewards: Sequence[float], kind: str) -> np.ndarray:
    if kind == "grpo":
        return grpo_advantages(rewards)
    if kind == "rloo":
        return rloo_advantages(rewards)
    raise ValueError(f"unknown estimator {kind!r}")


def distill_gate(rewards: Sequence[float], tau: float, strict: bool = False) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    return r > tau if strict else r >= tau


@dataclass
class GroupStats:
    rewards: np.ndarray
    weights: np.ndarray
    advantages: np.ndarray
    estimator_kind: str
    clip_epsilon: float
    distill_gate: np.ndarray


def _kl(a: PolicySnapshot, b: PolicySnapshot, ctx: Context, tokens, grad_out, coef, wrt_b):
    arr = _as_tokens(tokens)
    e = _encoded(ctx)
    steps = np.empty(len(arr))
    total = kernels.kl_path(a.weights, a.layout, b.weights, b.layout, e.cue, e.hint, e.revealed,
                            e.nuisance, arr, steps, grad_out, float(coef), wrt_b)
    return float(total), steps


def reference_kl(current: PolicySnapshot, ref: PolicySnapshot, ctx: Context, tokens: Sequence[int],
                 grad_out: Optional[np.ndarray] = None, coef: float = 1.0) -> float:
    """Sum over visited steps of exact KL(current || ref); +inf when ref has zero mass.

    With ``grad_out``, also accumulates ``coef`` times the gradient w.r.t. the
    current weights.
    """
    return _kl(current, ref, ctx, tokens, grad_out, coef, False)[0]


def distill_divergence(teacher: PolicySnapshot, student: PolicySnapshot, ctx: Context,
                       tokens: Sequence[int], grad_out: Optional[np.ndarray] = None,
                       coef: float = 1.0) -> float:
    """Length-normalized forward KL(teacher || student) along ``tokens``, nats/token.

    ``grad_out`` receives ``coef`` times the gradient w.r.t. the student weights.
    """
    n = len(tokens)
    total, _ = _kl(teacher, student, ctx, tokens, grad_out, coef / n, True)
    return total / n
