import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kepo import env
from kepo.estimators import (
    DegenerateSupportError,
    advantages,
    clip_is_active,
    clipped_weight,
    distill_divergence,
    distill_gate,
    grpo_advantages,
    importance_weight,
    reference_kl,
    rloo_advantages,
)
from kepo.policy import Label, PolicySnapshot, make_base_policy, make_teacher

from conftest import random_snapshot, support_snapshot

rewards_st = st.lists(st.floats(-5, 5, allow_nan=False), min_size=2, max_size=16)
STUDENT_LIKE = ("bias", "step", "prev_token", "cue", "cue_at_answer", "nuisance")


@pytest.mark.parametrize("new, old, expected", [
    (-2.0, -2.0, 1.0),
    (-1.0, -2.0, math.e),
    (-3.0, -2.0, math.exp(-1.0)),
])
def test_importance_weight_examples(new, old, expected):
    assert importance_weight(new, old) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("new, old", [(-math.inf, -1.0), (-1.0, -math.inf), (math.nan, 0.0)])
def test_importance_weight_degenerate(new, old):
    with pytest.raises(DegenerateSupportError):
        importance_weight(new, old)


def test_importance_weight_overflow_is_flagged():
    with pytest.raises(OverflowError):
        importance_weight(0.0, -1000.0)


@settings(max_examples=200)
@given(st.floats(-50, 0))
def test_ratio_identity(lp):
    assert importance_weight(lp, lp) == 1.0


@pytest.mark.parametrize("ratio, expected", [(1.5, 1.2), (0.5, 0.5), (1.0, 1.0), (0.9, 0.9)])
def test_clipped_weight_examples(ratio, expected):
    assert abs(clipped_weight(ratio, 0.2) - expected) < 1e-12


@settings(max_examples=500)
@given(st.floats(1e-6, 1e3), st.floats(0.01, 0.99))
def test_clip_ceiling(r, eps):
    w = clipped_weight(r, eps)
    assert w <= 1 + eps and w <= r
    assert clip_is_active(r, eps) == (r > 1 + eps)


@pytest.mark.parametrize("rewards, expected", [
    ([2, 0, 0, 0], [2, -2 / 3, -2 / 3, -2 / 3]),
    ([1, 1, 1, 1], [0, 0, 0, 0]),
    ([1, 0], [1, -1]),
])
def test_rloo_examples(rewards, expected):
    assert np.allclose(rloo_advantages(rewards), expected, rtol=0, atol=1e-12)


@pytest.mark.parametrize("rewards, expected", [
    ([2, 0, 0, 0], [1.5, -0.5, -0.5, -0.5]),
    ([1, 1, 1, 1], [0, 0, 0, 0]),
    ([2], [0]),
])
def test_grpo_examples(rewards, expected):
    assert np.allclose(grpo_advantages(rewards), expected, rtol=0, atol=1e-12)


def test_rloo_rejects_singleton():
    with pytest.raises(ValueError):
        rloo_advantages([1.0])
    with pytest.raises(ValueError):
        advantages([1.0, 0.0], "ppo")


def test_rloo_matches_leave_one_out_definition():
    rng = np.random.default_rng(0)
    for _ in range(100):
        r = rng.normal(size=rng.integers(2, 10))
        ref = np.array([r[i] - np.delete(r, i).mean() for i in range(len(r))])
        assert np.allclose(rloo_advantages(r), ref, atol=1e-12, rtol=0)


@settings(max_examples=300)
@given(rewards_st, st.floats(-100, 100))
def test_zero_sum_and_shift_invariance(r, c):
    for fn in (rloo_advantages, grpo_advantages):
        a = fn(r)
        assert abs(a.sum()) < 1e-12 * max(1.0, len(r) * max(map(abs, r), default=1.0))
        assert np.allclose(fn([x + c for x in r]), a, atol=1e-12 * max(1.0, abs(c)) * 10, rtol=0)


@settings(max_examples=300)
@given(st.floats(-10, 10), st.floats(-10, 10))
def test_g2_relation_exact(a, b):
    assert np.array_equal(rloo_advantages([a, b]), 2 * grpo_advantages([a, b]))


@pytest.mark.parametrize("strict, expected", [(False, [True, True, False, False]),
                                              (True, [True, False, False, False])])
def test_gate(strict, expected):
    assert distill_gate([2, 1, 0, 0], 1.0, strict).tolist() == expected


def test_reference_kl_identical_is_zero(ctx):
    base = make_base_policy(format_prior=2.0)
    assert reference_kl(base, base.frozen(Label.REFERENCE), ctx, (0, 8, 1, 2, 4, 3, 22)) == 0.0


def test_reference_kl_point_mass_vs_two_tokens(ctx):
    point = support_snapshot([0])
    two = support_snapshot([0, 1], Label.REFERENCE)
    assert abs(reference_kl(point, two, ctx, (0,)) - math.log(2)) < 1e-12


def test_reference_kl_infinite_when_ref_lacks_support(ctx):
    assert reference_kl(support_snapshot([0, 5]), support_snapshot([0]), ctx, (0,)) == math.inf


def test_kl_nonnegative_on_random_pairs(ctx):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        a = random_snapshot(rng, STUDENT_LIKE, scale=rng.uniform(0.1, 3))
        b = random_snapshot(rng, STUDENT_LIKE, scale=rng.uniform(0.1, 3))
        toks = tuple(int(x) for x in rng.integers(0, env.VOCAB_SIZE, rng.integers(1, 9)))
        assert reference_kl(a, b, ctx, toks) >= 0.0
        assert distill_divergence(a, b, ctx, toks) >= 0.0


def test_reference_kl_matches_enumeration(ctx):
    from kepo.policy import token_distribution

    rng = np.random.default_rng(2)
    a = random_snapshot(rng, STUDENT_LIKE)
    b = random_snapshot(rng, STUDENT_LIKE)
    toks = (0, 9, 1, 2, 5)
    expected = 0.0
    for s in range(len(toks)):
        p = token_distribution(a, ctx, toks[:s])
        q = token_distribution(b, ctx, toks[:s])
        expected += float(np.sum(p * (np.log(p) - np.log(q))))
    assert reference_kl(a, b, ctx, toks) == pytest.approx(expected, rel=1e-10)
    assert distill_divergence(a, b, ctx, toks) == pytest.approx(expected / len(toks), rel=1e-10)


def test_distill_identical_is_zero(cliff_tasks, ctx):
    t = make_teacher(cliff_tasks, 5.0)
    s = PolicySnapshot(t.weights.copy(), t.feature_map)
    assert distill_divergence(t, s, ctx, (0, 8, 1, 2, 4, 3)) == 0.0


def test_distill_point_mass_vs_uniform8(ctx):
    teacher = support_snapshot([3], Label.TEACHER)
    student = support_snapshot(range(8))
    toks = (3, 3, 3, 3, 3)
    assert abs(distill_divergence(teacher, student, ctx, toks) - math.log(8)) < 1e-12


def test_distill_truncation_recomputation(ctx):
    rng = np.random.default_rng(3)
    t = random_snapshot(rng, STUDENT_LIKE, label=Label.TEACHER)
    s = random_snapshot(rng, STUDENT_LIKE)
    toks = (0, 8, 9, 1, 2, 4, 3, 22)
    full = distill_divergence(t, s, ctx, toks) * len(toks)
    head = distill_divergence(t, s, ctx, toks[:4]) * 4
    # the removed tail's per-step KLs, recomputed one prefix at a time
    tail = sum(distill_divergence(t, s, ctx, toks[:k + 1]) * (k + 1)
               - distill_divergence(t, s, ctx, toks[:k]) * k for k in range(4, 8))
    assert full == pytest.approx(head + tail, rel=1e-12)


def test_distill_infinite_when_student_lacks_support(ctx):
    teacher = support_snapshot([0, 1], Label.TEACHER)
    student = support_snapshot([0])
    assert distill_divergence(teacher, student, ctx, (0,)) == math.inf
