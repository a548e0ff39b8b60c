"""Pure-Python/numpy kernels. Mirrors ``_kernels.pyx`` call for call."""
from __future__ import annotations

import math

import numpy as np

from . import env
from .features import BLOCK_CODES, G_OFF, G_START, grammar_next

_V = env.VOCAB_SIZE
_AO = env.ANSWER_OPEN
_END = env.END

_BIAS = BLOCK_CODES["bias"]
_STEP = BLOCK_CODES["step"]
_PREV = BLOCK_CODES["prev_token"]
_CUE = BLOCK_CODES["cue"]
_CUE_ANS = BLOCK_CODES["cue_at_answer"]
_NUIS = BLOCK_CODES["nuisance"]
_HINT = BLOCK_CODES["hint"]
_HINT_ANS = BLOCK_CODES["hint_at_answer"]
_REV = BLOCK_CODES["revealed"]
_REV_ANS = BLOCK_CODES["revealed_at_answer"]
_HPREV = BLOCK_CODES["hinted_prev_token"]
_OFF_CUE_ANS = BLOCK_CODES["offgrammar_cue_at_answer"]


def featurize(layout, cue, hint, revealed, nuis, prev, step, offgram):
    """Sparse feature vector as (column indices, values)."""
    idx = []
    val = []
    at_answer = prev == _AO
    if layout[_BIAS] >= 0:
        idx.append(layout[_BIAS]); val.append(1.0)
    if layout[_STEP] >= 0:
        idx.append(layout[_STEP] + step); val.append(1.0)
    if layout[_PREV] >= 0:
        idx.append(layout[_PREV] + prev); val.append(1.0)
    if layout[_CUE] >= 0:
        idx.append(layout[_CUE] + cue); val.append(1.0)
    if layout[_CUE_ANS] >= 0 and at_answer:
        idx.append(layout[_CUE_ANS] + cue); val.append(1.0)
    if layout[_NUIS] >= 0:
        for k in range(len(nuis)):
            idx.append(layout[_NUIS] + k); val.append(float(nuis[k]))
    if hint >= 0:
        if layout[_HINT] >= 0:
            idx.append(layout[_HINT]); val.append(1.0)
            idx.append(layout[_HINT] + 1 + hint); val.append(1.0)
        if layout[_HINT_ANS] >= 0 and at_answer:
            idx.append(layout[_HINT_ANS] + hint); val.append(1.0)
        if layout[_HPREV] >= 0:
            idx.append(layout[_HPREV] + prev); val.append(1.0)
    if revealed >= 0:
        if layout[_REV] >= 0:
            idx.append(layout[_REV] + revealed); val.append(1.0)
        if layout[_REV_ANS] >= 0 and at_answer:
            idx.append(layout[_REV_ANS] + revealed); val.append(1.0)
    if layout[_OFF_CUE_ANS] >= 0 and at_answer and offgram:
        idx.append(layout[_OFF_CUE_ANS] + cue); val.append(1.0)
    return np.array(idx, dtype=np.int64), np.array(val, dtype=np.float64)


def _dist(W, idx, val):
    """Probabilities and log-probabilities of the next token."""
    z = W[:, idx] @ val
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    m = z.max()
    e = np.exp(z - m)
    s = e.sum()
    p = e / s
    logp = (z - m) - math.log(s)
    logp[p == 0.0] = -np.inf
    return p, logp


def _walk_state(tokens, n):
    prev = env.BOS
    state = G_START
    for t in range(n):
        state = grammar_next(state, int(tokens[t]))
        prev = int(tokens[t])
    return prev, state


def step_probs(W, layout, cue, hint, revealed, nuis, prefix, out):
    n = len(prefix)
    prev, state = _walk_state(prefix, n)
    idx, val = featurize(layout, cue, hint, revealed, nuis, prev, n, state == G_OFF)
    p, _ = _dist(W, idx, val)
    out[:] = p


def sample(W, layout, cue, hint, revealed, nuis, uniforms, tokens_out, logps_out):
    prev = env.BOS
    state = G_START
    n = 0
    for step in range(env.MAX_LEN):
        idx, val = featurize(layout, cue, hint, revealed, nuis, prev, step, state == G_OFF)
        p, logp = _dist(W, idx, val)
        cum = np.cumsum(p)
        k = int(np.searchsorted(cum, uniforms[step], side="right"))
        if k >= _V:
            k = int(np.flatnonzero(p > 0.0)[-1])
        tokens_out[step] = k
        logps_out[step] = logp[k]
        n += 1
        if k == _END:
            break
        state = grammar_next(state, k)
        prev = k
    return n


def greedy(W, layout, cue, hint, revealed, nuis, uniforms, tokens_out, logps_out):
    prev = env.BOS
    state = G_START
    n = 0
    for step in range(env.MAX_LEN):
        idx, val = featurize(layout, cue, hint, revealed, nuis, prev, step, state == G_OFF)
        z = W[:, idx] @ val
        p, logp = _dist(W, idx, val)
        ties = np.flatnonzero(z == z.max())
        k = int(ties[min(int(uniforms[step] * len(ties)), len(ties) - 1)])
        tokens_out[step] = k
        logps_out[step] = logp[k]
        n += 1
        if k == _END:
            break
        state = grammar_next(state, k)
        prev = k
    return n


def logprob_grad(W, layout, cue, hint, revealed, nuis, tokens, logps_out, grad_out, coef):
    """Sum of step log-probs; optionally grad_out += coef * d/dW."""
    prev = env.BOS
    state = G_START
    total = 0.0
    for step in range(len(tokens)):
        k = int(tokens[step])
        idx, val = featurize(layout, cue, hint, revealed, nuis, prev, step, state == G_OFF)
        p, logp = _dist(W, idx, val)
        logps_out[step] = logp[k]
        total += logp[k]
        if grad_out is not None:
            g = -p
            g[k] += 1.0
            grad_out[:, idx] += coef * np.outer(g, val)
        state = grammar_next(state, k)
        prev = k
    return total


def kl_path(Wa, layout_a, Wb, layout_b, cue, hint, revealed, nuis, tokens, kl_out,
            grad_out, coef, wrt_b):
    """Per-step KL(pa || pb) along the prefixes of ``tokens``.

    With ``grad_out`` given, accumulates coef * d(sum KL) w.r.t. the weights of
    side b (``wrt_b``) or side a.
    """
    prev = env.BOS
    state = G_START
    total = 0.0
    for step in range(len(tokens)):
        off = state == G_OFF
        ia, va = featurize(layout_a, cue, hint, revealed, nuis, prev, step, off)
        ib, vb = featurize(layout_b, cue, hint, revealed, nuis, prev, step, off)
        pa, la = _dist(Wa, ia, va)
        pb, lb = _dist(Wb, ib, vb)
        pos = pa > 0.0
        if np.any(pos & (pb == 0.0)):
            kl = math.inf
        else:
            kl = float(np.sum(pa[pos] * (la[pos] - lb[pos])))
        kl_out[step] = kl
        total += kl
        if grad_out is not None and math.isfinite(kl):
            if wrt_b:
                grad_out[:, ib] += coef * np.outer(pb - pa, vb)
            else:
                diff = np.where(pos, la - lb, 0.0)
                grad_out[:, ia] += coef * np.outer(pa * (diff - kl), va)
        k = int(tokens[step])
        state = grammar_next(state, k)
        prev = k
    return total
