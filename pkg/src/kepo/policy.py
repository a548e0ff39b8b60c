"""Linear-softmax sequence policies over the task vocabulary."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import env, kernels
from .features import STUDENT_BLOCKS, TEACHER_EXTRA_BLOCKS, FeatureMap, encode_context


class Label(str, Enum):
    CURRENT = "CURRENT"
    OLD = "OLD"
    REFERENCE = "REFERENCE"
    TEACHER = "TEACHER"


class Provenance(str, Enum):
    ON_POLICY = "ON_POLICY"
    HINT_INJECTED = "HINT_INJECTED"


class DivergenceError(FloatingPointError):
    """Raised when weights or an objective term stop being finite."""


@dataclass
class PolicySnapshot:
    weights: np.ndarray
    feature_map: FeatureMap = field(default_factory=FeatureMap)
    label: Label = Label.CURRENT

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=np.float64)
        if w.shape != (env.VOCAB_SIZE, self.feature_map.dim):
            raise ValueError(f"weights shape {w.shape} != {(env.VOCAB_SIZE, self.feature_map.dim)}")
        if not np.all(np.isfinite(w)):
            raise DivergenceError("non-finite weights")
        if self.label is not Label.CURRENT:
            w = w.copy() if w.flags.writeable else w
            w.setflags(write=False)
        self.weights = w
        self._layout = self.feature_map.layout()

    @property
    def layout(self) -> np.ndarray:
        return self._layout

    def frozen(self, label: Label) -> "PolicySnapshot":
        if label is Label.CURRENT:
            raise ValueError("a frozen copy cannot carry the CURRENT label")
        return PolicySnapshot(self.weights.copy(), self.feature_map, label)

    def clone(self) -> "PolicySnapshot":
        return PolicySnapshot(self.weights.copy(), self.feature_map, Label.CURRENT)


@dataclass
class Trajectory:
    tokens: tuple[int, ...]
    step_logprobs: np.ndarray
    total_logprob: float
    reward: env.RewardBreakdown
    provenance: Provenance
    sampling_context: env.Context
    # log-prob of the tokens under the sampling snapshot with the hint removed
    plain_logprob: Optional[float] = None

    @property
    def total_reward(self) -> int:
        return self.reward.total


@lru_cache(maxsize=65536)
def _encoded(ctx: env.Context):
    return encode_context(ctx)


def _as_tokens(tokens: Sequence[int]) -> np.ndarray:
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim != 1 or len(arr) == 0 or len(arr) > env.MAX_LEN:
        raise ValueError(f"token sequence must have length 1..{env.MAX_LEN}")
    if arr.min() < 0 or arr.max() >= env.VOCAB_SIZE:
        raise ValueError("token outside vocabulary")
    return arr


def token_distribution(snap: PolicySnapshot, ctx: env.Context, prefix: Sequence[int],
                       step: Optional[int] = None) -> np.ndarray:
    step = len(prefix) if step is None else step
    if step != len(prefix):
        raise ValueError("step must equal the prefix length")
    if step >= env.MAX_LEN:
        raise ValueError(f"step {step} >= max length {env.MAX_LEN}")
    e = _encoded(ctx)
    out = np.empty(env.VOCAB_SIZE)
    kernels.step_probs(snap.weights, snap.layout, e.cue, e.hint, e.revealed, e.nuisance,
                       np.asarray(prefix, dtype=np.int64), out)
    return out


def _seqsum(xs) -> float:
    # left-to-right, matching the kernels' accumulation order
    total = 0.0
    for x in xs:
        total += float(x)
    return total


def _decode(snap, ctx, rng, fn):
    e = _encoded(ctx)
    u = rng.random(env.MAX_LEN)
    toks = np.empty(env.MAX_LEN, dtype=np.int64)
    logps = np.empty(env.MAX_LEN)
    n = fn(snap.weights, snap.layout, e.cue, e.hint, e.revealed, e.nuisance, u, toks, logps)
    return tuple(int(t) for t in toks[:n]), logps[:n].copy()


def sample_trajectory(snap: PolicySnapshot, ctx: env.Context, rng: np.random.Generator,
                      provenance: Provenance = Provenance.ON_POLICY) -> Trajectory:
    tokens, logps = _decode(snap, ctx, rng, kernels.sample)
    return Trajectory(tokens, logps, _seqsum(logps), env.score_trajectory(ctx, tokens),
                      provenance, ctx)


def greedy_decode(snap: PolicySnapshot, ctx: env.Context, rng: np.random.Generator) -> tuple[int, ...]:
    """Argmax decoding; exact logit ties are broken uniformly with ``rng``."""
    return _decode(snap, ctx, rng, kernels.greedy)[0]


def step_logprobs(snap: PolicySnapshot, ctx: env.Context, tokens: Sequence[int]) -> np.ndarray:
    arr = _as_tokens(tokens)
    e = _encoded(ctx)
    out = np.empty(len(arr))
    kernels.logprob_grad(snap.weights, snap.layout, e.cue, e.hint, e.revealed, e.nuisance,
                         arr, out, None, 0.0)
    return out


def trajectory_logprob(snap: PolicySnapshot, ctx: env.Context, tokens: Sequence[int]) -> float:
    """Sum of step log-probs in nats; -inf if some token's probability underflows to 0."""
    return _seqsum(step_logprobs(snap, ctx, tokens))


def accumulate_logprob_grad(snap: PolicySnapshot, ctx: env.Context, tokens: Sequence[int],
                            grad_out: np.ndarray, coef: float = 1.0) -> float:
    """grad_out += coef * d log pi(tokens | ctx) / dW; returns the log-prob."""
    arr = _as_tokens(tokens)
    e = _encoded(ctx)
    scratch = np.empty(len(arr))
    return float(kernels.logprob_grad(snap.weights, snap.layout, e.cue, e.hint, e.revealed,
                                      e.nuisance, arr, scratch, grad_out, float(coef)))


def grad_trajectory_logprob(snap: PolicySnapshot, ctx: env.Context, tokens: Sequence[int]) -> np.ndarray:
    grad = np.zeros_like(snap.weights, dtype=np.float64)
    accumulate_logprob_grad(snap, ctx, tokens, grad, 1.0)
    return grad


def uniform_policy(feature_map: Optional[FeatureMap] = None) -> PolicySnapshot:
    fm = feature_map or FeatureMap()
    return PolicySnapshot(np.zeros((env.VOCAB_SIZE, fm.dim)), fm, Label.CURRENT)


def _prev(fm: FeatureMap, tok: int, block: str = "prev_token") -> int:
    return fm.column(block, tok)


def make_base_policy(feature_map: Optional[FeatureMap] = None, hint_follow: float = 5.0,
                     format_prior: float = 0.0) -> PolicySnapshot:
    """Initial student.

    Plain contexts see a uniform policy (plus an optional format scaffold of
    strength ``format_prior``). When a hint is present the student follows
    the answer template and copies the revealed/hinted letter with logit
    margin ``hint_follow``; this is the instruction-following ability a
    pretrained student brings to the hint-aware prompt.
    """
    fm = feature_map or FeatureMap()
    W = np.zeros((env.VOCAB_SIZE, fm.dim))
    letters = [env.letter_token(k) for k in range(env.N_LETTERS)]
    fillers = [env.filler_token(k) for k in range(env.N_FILLERS)]
    if hint_follow:
        h = hint_follow
        hp = "hinted_prev_token"
        W[env.THINK_OPEN, _prev(fm, env.BOS, hp)] = h
        for f in fillers:
            W[f, _prev(fm, env.THINK_OPEN, hp)] = h
            W[env.THINK_CLOSE, _prev(fm, f, hp)] = h
        W[env.ANSWER_OPEN, _prev(fm, env.THINK_CLOSE, hp)] = h
        for k, lt in enumerate(letters):
            W[lt, fm.column("revealed_at_answer", k)] = h
            W[lt, fm.column("hint_at_answer", k)] = h
            W[env.ANSWER_CLOSE, _prev(fm, lt, hp)] = h
        W[env.END, _prev(fm, env.ANSWER_CLOSE, hp)] = h
    if format_prior:
        f0 = format_prior
        W[env.THINK_OPEN, _prev(fm, env.BOS)] += f0
        W[env.THINK_CLOSE, _prev(fm, env.THINK_OPEN)] += f0
        W[env.ANSWER_OPEN, _prev(fm, env.THINK_CLOSE)] += f0
        for lt in letters:
            W[lt, _prev(fm, env.ANSWER_OPEN)] += f0
            W[env.ANSWER_CLOSE, _prev(fm, lt)] += f0
        W[env.END, _prev(fm, env.ANSWER_CLOSE)] += f0
    return PolicySnapshot(W, fm, Label.CURRENT)


def make_teacher(task_set: env.TaskSet, strength: float) -> PolicySnapshot:
    """Fixed teacher built from logit margins of ``2 * strength``.

    Emits ``<think> F0 </think> <answer> L </answer> <end>`` with the correct
    letter, and maps a revealed answer to its hint symbol. On the corrupted
    variant it answers the wrong letter whenever its prefix has already left
    the grammar.
    """
    if strength <= 0:
        raise ValueError("teacher strength must be > 0")
    blocks = STUDENT_BLOCKS + (TEACHER_EXTRA_BLOCKS if task_set.corrupted else ())
    fm = FeatureMap(blocks)
    s = 2.0 * strength
    table = task_set.family.table
    W = np.zeros((env.VOCAB_SIZE, fm.dim))
    W[env.THINK_OPEN, _prev(fm, env.BOS)] = s
    W[env.filler_token(0), _prev(fm, env.THINK_OPEN)] = s
    for k in range(env.N_FILLERS):
        W[env.THINK_CLOSE, _prev(fm, env.filler_token(k))] = s
    W[env.ANSWER_OPEN, _prev(fm, env.THINK_CLOSE)] = s
    for c in range(env.N_CUE_PAIRS):
        W[env.letter_token(table[c]), fm.column("cue_at_answer", c)] = s
        if task_set.corrupted:
            W[env.letter_token(1 - table[c]), fm.column("offgrammar_cue_at_answer", c)] = 2.0 * s
    for k in range(env.N_LETTERS):
        W[env.ANSWER_CLOSE, _prev(fm, env.letter_token(k))] = s
        W[env.hint_token(k), fm.column("revealed", k)] = s
    W[env.END, _prev(fm, env.ANSWER_CLOSE)] = s
    return PolicySnapshot(W, fm, Label.TEACHER)


_MAGIC = b"KEPOSNAP1\n"


def save_snapshot(snap: PolicySnapshot, path: str | Path) -> None:
    header = {
        "label": snap.label.value,
        "shape": list(snap.weights.shape),
        "dtype": "<f8",
        "feature_map": snap.feature_map.to_dict(),
    }
    payload = np.ascontiguousarray(snap.weights, dtype="<f8").tobytes()
    data = _MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload
    Path(path).write_bytes(data)


def load_snapshot(path: str | Path) -> PolicySnapshot:
    raw = Path(path).read_bytes()
    if not raw.startswith(_MAGIC):
        raise ValueError(f"{path}: not a snapshot file")
    rest = raw[len(_MAGIC):]
    nl = rest.index(b"\n")
    header = json.loads(rest[:nl])
    w = np.frombuffer(rest[nl + 1:], dtype=header["dtype"]).reshape(header["shape"]).copy()
    return PolicySnapshot(w, FeatureMap.from_dict(header["feature_map"]), Label(header["label"]))
