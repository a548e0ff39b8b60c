import numpy as np
import pytest

from kepo import env
from kepo.features import FeatureMap
from kepo.policy import Label, PolicySnapshot, make_base_policy, make_teacher

V = env.VOCAB_SIZE
NEG = -1e3  # exp(NEG) underflows to exactly 0 in float64


@pytest.fixture(scope="session")
def cliff_tasks():
    return env.make_task_set(7, 200, 40, 2, cliff_mode=True)


@pytest.fixture(scope="session")
def easy_tasks():
    return env.make_task_set(1, 200, 40, 2, cliff_mode=False)


@pytest.fixture(scope="session")
def teacher10(cliff_tasks):
    return make_teacher(cliff_tasks, 10.0)


@pytest.fixture
def base_old():
    return make_base_policy().frozen(Label.OLD)


@pytest.fixture
def ctx():
    return env.Context("parity", (1, 0), (0.3, -0.1, 0.2, 0.0))


def random_snapshot(rng, blocks=("bias", "step", "cue"), scale=1.0, label=Label.CURRENT):
    fm = FeatureMap(tuple(blocks))
    return PolicySnapshot(rng.normal(0.0, scale, (V, fm.dim)), fm, label)


def support_snapshot(support, label=Label.CURRENT):
    """Uniform over ``support``; every other token gets probability exactly 0."""
    fm = FeatureMap(("bias",))
    w = np.full((V, 1), NEG)
    w[list(support), 0] = 0.0
    return PolicySnapshot(w, fm, label)


def chain_snapshot(tokens, margin=20.0, label=Label.CURRENT):
    """Emits ``tokens[s]`` at step ``s`` with logit margin ``margin``."""
    fm = FeatureMap(("step",))
    w = np.zeros((V, fm.dim))
    for s, t in enumerate(tokens):
        w[t, s] = margin
    return PolicySnapshot(w, fm, label)


def well_formed(letter, n_filler=1, end=True):
    toks = [env.THINK_OPEN] + [env.filler_token(0)] * n_filler
    toks += [env.THINK_CLOSE, env.ANSWER_OPEN, env.letter_token(letter), env.ANSWER_CLOSE]
    return tuple(toks + ([env.END] if end else []))
