import math
from collections import Counter

import numpy as np
import pytest

from kepo import env
from kepo.features import FeatureMap
from kepo.policy import Label, PolicySnapshot, Provenance, make_base_policy, make_teacher, sample_trajectory
from kepo.rollout import (
    RolloutConfig,
    generate_hint,
    hint_rejection_sample,
    knowledge_enhanced_rollout,
    standard_group_rollout,
)

V = env.VOCAB_SIZE


def _always_end():
    """Emits END immediately, so no response ever earns reward."""
    fm = FeatureMap(("bias",))
    w = np.full((V, 1), -1e3)
    w[env.END, 0] = 0.0
    return PolicySnapshot(w, fm, Label.OLD)


@pytest.mark.parametrize("kwargs", [dict(G=1), dict(B=0), dict(m=0), dict(G=4, m=4)])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        RolloutConfig(**kwargs)


def test_standard_rollout_count_and_determinism(cliff_tasks, base_old):
    c = cliff_tasks.train_contexts[0]
    a = standard_group_rollout(base_old, c, 8, np.random.default_rng(1))
    b = standard_group_rollout(base_old, c, 8, np.random.default_rng(1))
    assert len(a) == 8
    assert [t.tokens for t in a] == [t.tokens for t in b]
    assert all(t.provenance is Provenance.ON_POLICY for t in a)


def test_standard_rollout_rejects_hinted_context(cliff_tasks, base_old):
    c = cliff_tasks.train_contexts[0].with_hint(env.hint_token(0), 0)
    with pytest.raises(ValueError):
        standard_group_rollout(base_old, c, 4, np.random.default_rng(0))


def test_teacher_as_policy_near_oracle(cliff_tasks, teacher10):
    rng = np.random.default_rng(2)
    rewards = [t.reward.total for i in range(100)
               for t in standard_group_rollout(teacher10, cliff_tasks.train_contexts[i], 8, rng)]
    assert np.mean(rewards) >= 1.9


def test_hint_encodes_answer(cliff_tasks, teacher10):
    rng = np.random.default_rng(3)
    hits = 0
    n = 0
    for c in cliff_tasks.eval_splits["ID"]:
        for _ in range(25):
            y = env.correct_letter(c)
            hits += generate_hint(teacher10, c, y, rng) == env.hint_token(y)
            n += 1
    assert hits / n >= 0.95


def test_hint_determinism(cliff_tasks, teacher10):
    c = cliff_tasks.train_contexts[1]
    a = generate_hint(teacher10, c, 0, np.random.default_rng(9))
    b = generate_hint(teacher10, c, 0, np.random.default_rng(9))
    assert a == b and env.is_hint(a)


def test_near_uniform_teacher_hints_uniform(cliff_tasks):
    weak = make_teacher(cliff_tasks, 1e-4)
    rng = np.random.default_rng(4)
    n = 8000
    counts = Counter(generate_hint(weak, cliff_tasks.train_contexts[i % 50], 1, rng) for i in range(n))
    obs = np.array([counts[env.hint_token(k)] for k in range(env.N_HINTS)])
    chi2 = float(((obs - n / 4) ** 2 / (n / 4)).sum())
    assert chi2 < 16.27  # 99.9% quantile, 3 dof


def test_hint_requires_teacher(cliff_tasks, base_old):
    with pytest.raises(ValueError):
        generate_hint(base_old, cliff_tasks.train_contexts[0], 0, np.random.default_rng(0))


def test_hint_is_informative(cliff_tasks, teacher10, base_old):
    rng = np.random.default_rng(5)
    with_hint = without = 0
    for c in cliff_tasks.train_contexts:
        y = env.correct_letter(c)
        h = generate_hint(teacher10, c, y, rng)
        with_hint += sample_trajectory(base_old, c.with_hint(h, y), rng).reward.accuracy
        without += sample_trajectory(base_old, c, rng).reward.accuracy
    assert with_hint > without


def test_rejection_accepts_only_rewarded(cliff_tasks, base_old):
    rng = np.random.default_rng(6)
    for c in cliff_tasks.train_contexts[:100]:
        y = env.correct_letter(c)
        traj, used = hint_rejection_sample(base_old, c, env.hint_token(y), y, 8, rng)
        assert 1 <= used <= 8
        if traj is not None:
            assert traj.reward.total > 0
            assert traj.provenance is Provenance.HINT_INJECTED
            assert traj.sampling_context.hint == env.hint_token(y)
            assert traj.sampling_context.revealed_answer == y
            assert traj.plain_logprob is not None and traj.plain_logprob < traj.total_logprob


def test_rejection_budget_exhaustion(cliff_tasks):
    c = cliff_tasks.train_contexts[0]
    traj, used = hint_rejection_sample(_always_end(), c, env.hint_token(0), 0, 8, np.random.default_rng(0))
    assert traj is None and used == 8


@pytest.mark.parametrize("B", [1, 2, 8])
def test_acceptance_frequency_geometric(cliff_tasks, base_old, B):
    ctxs = cliff_tasks.train_contexts
    # per-attempt success probability, measured on independent draws
    rng = np.random.default_rng(100 + B)
    n_p = 20_000
    succ = 0
    for i in range(n_p):
        c = ctxs[i % len(ctxs)]
        y = env.correct_letter(c)
        succ += sample_trajectory(base_old, c.with_hint(env.hint_token(y), y), rng).reward.total > 0
    p = succ / n_p
    n = 10_000
    acc = 0
    rng = np.random.default_rng(200 + B)
    for i in range(n):
        c = ctxs[i % len(ctxs)]
        y = env.correct_letter(c)
        acc += hint_rejection_sample(base_old, c, env.hint_token(y), y, B, rng)[0] is not None
    q = 1 - (1 - p) ** B
    # 3 sigma of the frequency plus the propagated uncertainty of the measured p
    dq = B * (1 - p) ** (B - 1) * math.sqrt(p * (1 - p) / n_p)
    sigma = math.sqrt(q * (1 - q) / n + dq ** 2)
    assert abs(acc / n - q) <= 3 * max(sigma, 1 / n)


def test_untrained_policy_triggers_on_cliff(cliff_tasks, teacher10, base_old):
    cfg = RolloutConfig(G=8, B=8, m=1)
    triggered = 0
    for j, c in enumerate(cliff_tasks.train_contexts):
        g = knowledge_enhanced_rollout(base_old, teacher10, c, cfg, np.random.default_rng(j))
        triggered += g.triggered
        if g.triggered and not g.discarded:
            prov = Counter(t.provenance for t in g.trajectories)
            assert prov[Provenance.HINT_INJECTED] == 1
            assert prov[Provenance.ON_POLICY] == cfg.G - 1
            assert g.injected_count == 1 and g.hint_used is not None
    assert triggered / len(cliff_tasks.train_contexts) > 0.95


def test_near_oracle_rarely_triggers(easy_tasks):
    t = make_teacher(easy_tasks, 10.0)
    cfg = RolloutConfig()
    rng = np.random.default_rng(7)
    trig = sum(knowledge_enhanced_rollout(t, t, easy_tasks.train_contexts[i % 200], cfg, rng).triggered
               for i in range(1000))
    assert trig / 1000 <= 0.01


@pytest.mark.parametrize("seed", range(10))
def test_hints_disabled_equals_standard(cliff_tasks, teacher10, base_old, seed):
    c = cliff_tasks.train_contexts[seed]
    g = knowledge_enhanced_rollout(base_old, teacher10, c, RolloutConfig(hint_enabled=False),
                                   np.random.default_rng(seed))
    std = standard_group_rollout(base_old, c, 8, np.random.default_rng(seed))
    assert not g.triggered
    assert [t.tokens for t in g.trajectories] == [t.tokens for t in std]
    assert [t.total_logprob for t in g.trajectories] == [t.total_logprob for t in std]


def test_all_fail_group_is_discarded(cliff_tasks, teacher10):
    g = knowledge_enhanced_rollout(_always_end(), teacher10, cliff_tasks.train_contexts[0],
                                   RolloutConfig(m=2), np.random.default_rng(0))
    assert g.triggered and g.discarded and g.trajectories == []
    assert g.attempts_used == 16
    assert g.to_record(0)["discarded"] is True


@pytest.mark.parametrize("m", [1, 2, 3, 7])
def test_group_invariants(cliff_tasks, teacher10, base_old, m):
    cfg = RolloutConfig(G=8, B=4, m=m)
    for j, c in enumerate(cliff_tasks.train_contexts[:60]):
        g = knowledge_enhanced_rollout(base_old, teacher10, c, cfg, np.random.default_rng(j))
        assert g.triggered == (max(g.on_policy_rewards) == 0)
        assert g.attempts_used <= m * cfg.B
        injected = [t for t in g.trajectories if t.provenance is Provenance.HINT_INJECTED]
        assert all(t.reward.total > 0 for t in injected)
        assert len(injected) == g.injected_count <= m
        if not g.discarded:
            assert len(g.trajectories) == cfg.G
        if not g.triggered:
            assert not injected
        # every kept on-policy trajectory was scored as zero reward before injection
        if g.triggered:
            assert all(t.reward.total == 0 for t in g.trajectories if t.provenance is Provenance.ON_POLICY)


def test_backfill_subset_is_seed_deterministic(cliff_tasks, teacher10, base_old):
    c = cliff_tasks.train_contexts[3]
    cfg = RolloutConfig(m=3)
    a = knowledge_enhanced_rollout(base_old, teacher10, c, cfg, np.random.default_rng(42))
    b = knowledge_enhanced_rollout(base_old, teacher10, c, cfg, np.random.default_rng(42))
    assert [t.tokens for t in a.trajectories] == [t.tokens for t in b.trajectories]


def test_hint_needs_teacher(cliff_tasks, base_old):
    with pytest.raises(ValueError):
        knowledge_enhanced_rollout(base_old, None, cliff_tasks.train_contexts[0], RolloutConfig(),
                                   np.random.default_rng(0))


def test_trace_record_fields(cliff_tasks, teacher10, base_old):
    g = knowledge_enhanced_rollout(base_old, teacher10, cliff_tasks.train_contexts[0], RolloutConfig(),
                                   np.random.default_rng(1))
    rec = g.to_record(5)
    assert set(rec) >= {"context_index", "rewards", "triggered", "attempts_used", "provenance"}
    assert rec["context_index"] == 5 and len(rec["provenance"]) == len(rec["rewards"])
    assert g.leaked >= 0
