"""Fast invariant checks run by ``kepo selftest``.

Each check returns ``(ok, detail)``. They use small sizes so the whole suite
finishes in a few seconds; the test suite covers the same ground at full size.
"""
from __future__ import annotations

import math
import time
from typing import Callable

import numpy as np

from . import env, kernels
from .estimators import (
    clipped_weight,
    distill_divergence,
    grpo_advantages,
    reference_kl,
    rloo_advantages,
)
from .features import FeatureMap
from .objective import ObjectiveConfig
from .policy import (
    Label,
    PolicySnapshot,
    grad_trajectory_logprob,
    make_base_policy,
    make_teacher,
    sample_trajectory,
    trajectory_logprob,
    uniform_policy,
)
from .rollout import RolloutConfig, knowledge_enhanced_rollout, standard_group_rollout
from .trainer import TrainConfig, train_run

Check = Callable[[], tuple[bool, str]]


def _advantages() -> tuple[bool, str]:
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        g = int(rng.choice([2, 4, 8]))
        r = rng.integers(0, 3, g).astype(float)
        for a in (rloo_advantages(r), grpo_advantages(r)):
            worst = max(worst, abs(a.sum()))
        if g == 2 and not np.array_equal(rloo_advantages(r), 2 * grpo_advantages(r)):
            return False, f"rloo != 2*grpo for {r}"
    return worst < 1e-12, f"max |sum| = {worst:.1e}"


def _hand_values() -> tuple[bool, str]:
    ok = (np.allclose(rloo_advantages([2, 0, 0, 0]), [2, -2 / 3, -2 / 3, -2 / 3], atol=1e-12, rtol=0)
          and np.allclose(grpo_advantages([2, 0, 0, 0]), [1.5, -0.5, -0.5, -0.5], atol=1e-12, rtol=0)
          and abs(clipped_weight(1.5, 0.2) - 1.2) < 1e-12)
    return ok, "rloo/grpo on [2,0,0,0], clip(1.5, 0.2)"


def _gradient() -> tuple[bool, str]:
    rng = np.random.default_rng(1)
    fm = FeatureMap(("bias", "step", "cue"))
    ctx = env.Context("parity", (1, 0), (0.1, -0.2, 0.3, 0.0))
    worst = 0.0
    for _ in range(5):
        snap = PolicySnapshot(rng.normal(0, 1, (env.VOCAB_SIZE, fm.dim)), fm)
        toks = tuple(int(t) for t in rng.integers(0, env.VOCAB_SIZE, 6))
        g = grad_trajectory_logprob(snap, ctx, toks)
        num = np.zeros_like(g)
        h = 1e-5
        for i in range(num.shape[0]):
            for j in range(num.shape[1]):
                w = snap.weights.copy()
                w[i, j] += h
                up = trajectory_logprob(PolicySnapshot(w, fm), ctx, toks)
                w[i, j] -= 2 * h
                dn = trajectory_logprob(PolicySnapshot(w, fm), ctx, toks)
                num[i, j] = (up - dn) / (2 * h)
        worst = max(worst, np.linalg.norm(g - num) / max(np.linalg.norm(num), 1e-12))
    return worst < 1e-4, f"max relative error {worst:.1e}"


def _kl() -> tuple[bool, str]:
    fm = FeatureMap(("bias",))
    ctx = env.Context("parity", (0, 0), (0.0,) * env.N_NUISANCE)
    point = np.full((env.VOCAB_SIZE, 1), -1e3)
    point[0, 0] = 0.0
    two = np.full((env.VOCAB_SIZE, 1), -1e3)
    two[0, 0] = two[1, 0] = 0.0
    a = PolicySnapshot(point, fm, Label.TEACHER)
    b = PolicySnapshot(two, fm, Label.REFERENCE)
    d1 = reference_kl(a, b, ctx, (0,))
    d2 = distill_divergence(a, b, ctx, (0,))
    base = make_base_policy()
    same = reference_kl(base, base, ctx, (0, 8, 1, 2, 4, 3))
    ok = abs(d1 - math.log(2)) < 1e-12 and abs(d2 - math.log(2)) < 1e-12 and same == 0.0
    return ok, f"KL(point||uniform2) = {d1!r}, KL(p||p) = {same!r}"


def _cliff() -> tuple[bool, str]:
    ts = env.make_task_set(7, 50, 5, 1, cliff_mode=True)
    u = uniform_policy().frozen(Label.OLD)
    rng = np.random.default_rng(0)
    total = sum(sample_trajectory(u, ts.train_contexts[i % 50], rng).reward.total for i in range(2000))
    return total / 2000 < 0.01, f"uniform mean reward {total / 2000:.4f}"


def _rollout() -> tuple[bool, str]:
    ts = env.make_task_set(3, 40, 5, 1, cliff_mode=True)
    teacher = make_teacher(ts, 10.0)
    old = make_base_policy().frozen(Label.OLD)
    cfg = RolloutConfig()
    triggered = 0
    for j, ctx in enumerate(ts.train_contexts):
        g = knowledge_enhanced_rollout(old, teacher, ctx, cfg, np.random.default_rng(j))
        triggered += g.triggered
        if g.attempts_used > cfg.m * cfg.B:
            return False, "attempt budget exceeded"
        if not g.discarded and len(g.trajectories) != cfg.G:
            return False, "group size violated"
        if any(t.reward.total <= 0 for t in g.trajectories if t.provenance.value == "HINT_INJECTED"):
            return False, "injected trajectory without reward"
        plain = knowledge_enhanced_rollout(old, teacher, ctx, RolloutConfig(hint_enabled=False),
                                           np.random.default_rng(j))
        std = standard_group_rollout(old, ctx, cfg.G, np.random.default_rng(j))
        if [t.tokens for t in plain.trajectories] != [t.tokens for t in std]:
            return False, "hint_enabled=false differs from standard rollout"
    frac = triggered / len(ts.train_contexts)
    return frac > 0.95, f"triggered fraction {frac:.2f}"


def _reduction() -> tuple[bool, str]:
    ts = env.make_task_set(0, 64, 10, 1, cliff_mode=True)
    obj = ObjectiveConfig(tau=3.0)
    a = train_run(ts, TrainConfig(method="grpo", seed=5, objective=obj, steps=10))
    b = train_run(ts, TrainConfig(method="kepo", seed=5, objective=obj, steps=10,
                                  rollout=RolloutConfig(hint_enabled=False)))
    same = (np.array_equal(a.policy.weights, b.policy.weights)
            and a.metrics.steps_jsonl() == b.metrics.steps_jsonl())
    return same, "kepo(tau=3, no hints) vs grpo over 10 steps"


def _gate_accounting() -> tuple[bool, str]:
    ts = env.make_task_set(0, 64, 10, 1, cliff_mode=True)
    counted = []
    res = train_run(ts, TrainConfig(method="kepo", seed=1, steps=10), trace=True)
    for rec in res.trace:
        if not rec["discarded"]:
            counted.append(sum(r >= 1.0 for r in rec["rewards"]))
    distilled = sum(s["distilled_count"] for s in res.metrics.steps)
    return distilled == sum(counted), f"distilled {distilled}, gated {sum(counted)}"


def _determinism() -> tuple[bool, str]:
    ts = env.make_task_set(2, 64, 10, 1, cliff_mode=True)
    cfg = TrainConfig(method="kepo", seed=3, steps=5)
    a, b = train_run(ts, cfg), train_run(ts, cfg)
    same = (a.metrics.steps_jsonl() == b.metrics.steps_jsonl()
            and a.policy.weights.tobytes() == b.policy.weights.tobytes())
    return same, "two identical runs"


def _backend_parity() -> tuple[bool, str]:
    from . import _pykernels

    if kernels.BACKEND == "python":
        return True, "pure-python backend active; nothing to compare"
    rng = np.random.default_rng(4)
    snap = make_base_policy(format_prior=1.0)
    snap.weights += rng.normal(0, 0.5, snap.weights.shape)
    layout = snap.layout
    nuis = np.tanh(rng.normal(0, 1, env.N_NUISANCE))
    toks = np.array([0, 8, 9, 1, 2, 5, 3, 22], dtype=np.int64)
    out = []
    for mod in (kernels, _pykernels):
        lp = np.empty(len(toks))
        g = np.zeros_like(snap.weights)
        total = mod.logprob_grad(snap.weights, layout, 2, -1, -1, nuis, toks, lp, g, 1.0)
        out.append((total, lp, g))
    (t1, l1, g1), (t2, l2, g2) = out
    ok = abs(t1 - t2) < 1e-10 and np.allclose(l1, l2, atol=1e-12) and np.allclose(g1, g2, atol=1e-12)
    return ok, f"cython vs python log-prob diff {abs(t1 - t2):.1e}"


CHECKS: dict[str, Check] = {
    "advantage identities": _advantages,
    "hand-checked values": _hand_values,
    "log-prob gradient": _gradient,
    "KL sanity": _kl,
    "cliff property": _cliff,
    "rollout semantics": _rollout,
    "kepo->grpo reduction": _reduction,
    "gate accounting": _gate_accounting,
    "determinism": _determinism,
    "backend parity": _backend_parity,
}


def run_all(echo: Callable[[str], None] = print) -> bool:
    all_ok = True
    for name, check in CHECKS.items():
        t0 = time.perf_counter()
        try:
            ok, detail = check()
        except Exception as exc:  # report and keep going
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= ok
        echo(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail} ({time.perf_counter() - t0:.2f}s)")
    echo(f"backend: {kernels.BACKEND}")
    return all_ok
