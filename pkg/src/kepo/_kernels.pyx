# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: featurization, softmax, sampling, log-prob gradients, KL.

Semantics match ``_pykernels`` exactly; only the arithmetic order inside the
softmax sums may differ in the last ulp.
"""
from libc.math cimport exp, log, INFINITY, isfinite

import numpy as np

# token ids and block codes; must agree with env.py and features.py
cdef enum:
    V = 23
    BOS = 23
    MAX_LEN = 8
    AO = 2
    END_TOK = 22
    MAX_ACTIVE = 48
    B_BIAS = 0
    B_STEP = 1
    B_PREV = 2
    B_CUE = 3
    B_CUE_ANS = 4
    B_NUIS = 5
    B_HINT = 6
    B_HINT_ANS = 7
    B_REV = 8
    B_REV_ANS = 9
    B_HPREV = 10
    B_OFF_CUE_ANS = 11
    G_START = 0
    G_THINK = 1
    G_CLOSED = 2
    G_ANS_OPEN = 3
    G_LETTER = 4
    G_DONE = 5
    G_END = 6
    G_OFF = 7
    THINK_OPEN = 0
    THINK_CLOSE = 1
    ANSWER_CLOSE = 3
    LETTER_BASE = 4
    FILLER_BASE = 8
    HINT_BASE = 18


def vocab_size():
    return V


cdef inline int grammar_next(int state, int tok) nogil:
    if state == G_START:
        return G_THINK if tok == THINK_OPEN else G_OFF
    if state == G_THINK:
        if FILLER_BASE <= tok < HINT_BASE:
            return G_THINK
        return G_CLOSED if tok == THINK_CLOSE else G_OFF
    if state == G_CLOSED:
        return G_ANS_OPEN if tok == AO else G_OFF
    if state == G_ANS_OPEN:
        return G_LETTER if LETTER_BASE <= tok < FILLER_BASE else G_OFF
    if state == G_LETTER:
        return G_DONE if tok == ANSWER_CLOSE else G_OFF
    if state == G_DONE:
        return G_END if tok == END_TOK else G_OFF
    return G_OFF


cdef int featurize(const long[:] layout, int cue, int hint, int revealed,
                   const double[:] nuis, int prev, int step, bint offgram,
                   long* idx, double* val) nogil:
    cdef int n = 0
    cdef int k
    cdef bint at_answer = prev == AO
    if layout[B_BIAS] >= 0:
        idx[n] = layout[B_BIAS]; val[n] = 1.0; n += 1
    if layout[B_STEP] >= 0:
        idx[n] = layout[B_STEP] + step; val[n] = 1.0; n += 1
    if layout[B_PREV] >= 0:
        idx[n] = layout[B_PREV] + prev; val[n] = 1.0; n += 1
    if layout[B_CUE] >= 0:
        idx[n] = layout[B_CUE] + cue; val[n] = 1.0; n += 1
    if layout[B_CUE_ANS] >= 0 and at_answer:
        idx[n] = layout[B_CUE_ANS] + cue; val[n] = 1.0; n += 1
    if layout[B_NUIS] >= 0:
        for k in range(nuis.shape[0]):
            idx[n] = layout[B_NUIS] + k; val[n] = nuis[k]; n += 1
    if hint >= 0:
        if layout[B_HINT] >= 0:
            idx[n] = layout[B_HINT]; val[n] = 1.0; n += 1
            idx[n] = layout[B_HINT] + 1 + hint; val[n] = 1.0; n += 1
        if layout[B_HINT_ANS] >= 0 and at_answer:
            idx[n] = layout[B_HINT_ANS] + hint; val[n] = 1.0; n += 1
        if layout[B_HPREV] >= 0:
            idx[n] = layout[B_HPREV] + prev; val[n] = 1.0; n += 1
    if revealed >= 0:
        if layout[B_REV] >= 0:
            idx[n] = layout[B_REV] + revealed; val[n] = 1.0; n += 1
        if layout[B_REV_ANS] >= 0 and at_answer:
            idx[n] = layout[B_REV_ANS] + revealed; val[n] = 1.0; n += 1
    if layout[B_OFF_CUE_ANS] >= 0 and at_answer and offgram:
        idx[n] = layout[B_OFF_CUE_ANS] + cue; val[n] = 1.0; n += 1
    return n


cdef int dist(const double[:, :] W, long* idx, double* val, int n,
              double* z, double* p, double* logp) nogil:
    """Fill p/logp for the sparse feature vector; -1 on non-finite logits."""
    cdef int v, j
    cdef double acc, m, s, lse
    for v in range(V):
        acc = 0.0
        for j in range(n):
            acc += W[v, idx[j]] * val[j]
        if not isfinite(acc):
            return -1
        z[v] = acc
    m = z[0]
    for v in range(1, V):
        if z[v] > m:
            m = z[v]
    s = 0.0
    for v in range(V):
        p[v] = exp(z[v] - m)
        s += p[v]
    lse = log(s)
    for v in range(V):
        p[v] = p[v] / s
        logp[v] = (z[v] - m) - lse if p[v] > 0.0 else -INFINITY
    return 0


cdef inline void _check(int status) except *:
    if status != 0:
        raise FloatingPointError("non-finite logits")


def step_probs(const double[:, :] W, const long[:] layout, int cue, int hint, int revealed,
               const double[:] nuis, const long[:] prefix, double[:] out):
    cdef long idx[MAX_ACTIVE]
    cdef double val[MAX_ACTIVE]
    cdef double z[V]
    cdef double p[V]
    cdef double logp[V]
    cdef int prev = BOS, state = G_START, t, n, v
    for t in range(prefix.shape[0]):
        state = grammar_next(state, prefix[t])
        prev = prefix[t]
    n = featurize(layout, cue, hint, revealed, nuis, prev, prefix.shape[0], state == G_OFF, idx, val)
    _check(dist(W, idx, val, n, z, p, logp))
    for v in range(V):
        out[v] = p[v]


def sample(const double[:, :] W, const long[:] layout, int cue, int hint, int revealed,
           const double[:] nuis, const double[:] uniforms, long[:] tokens_out, double[:] logps_out):
    cdef long idx[MAX_ACTIVE]
    cdef double val[MAX_ACTIVE]
    cdef double z[V]
    cdef double p[V]
    cdef double logp[V]
    cdef int prev = BOS, state = G_START, step, n, k, v, length = 0
    cdef double cum, u
    for step in range(MAX_LEN):
        n = featurize(layout, cue, hint, revealed, nuis, prev, step, state == G_OFF, idx, val)
        _check(dist(W, idx, val, n, z, p, logp))
        u = uniforms[step]
        cum = 0.0
        k = -1
        for v in range(V):
            cum += p[v]
            if u < cum:
                k = v
                break
        if k < 0:
            for v in range(V - 1, -1, -1):
                if p[v] > 0.0:
                    k = v
                    break
        tokens_out[step] = k
        logps_out[step] = logp[k]
        length += 1
        if k == END_TOK:
            break
        state = grammar_next(state, k)
        prev = k
    return length


def greedy(const double[:, :] W, const long[:] layout, int cue, int hint, int revealed,
           const double[:] nuis, const double[:] uniforms, long[:] tokens_out, double[:] logps_out):
    cdef long idx[MAX_ACTIVE]
    cdef double val[MAX_ACTIVE]
    cdef double z[V]
    cdef double p[V]
    cdef double logp[V]
    cdef int prev = BOS, state = G_START, step, n, k, v, count, pick, length = 0
    cdef double m
    for step in range(MAX_LEN):
        n = featurize(layout, cue, hint, revealed, nuis, prev, step, state == G_OFF, idx, val)
        _check(dist(W, idx, val, n, z, p, logp))
        m = z[0]
        for v in range(1, V):
            if z[v] > m:
                m = z[v]
        count = 0
        for v in range(V):
            if z[v] == m:
                count += 1
        pick = <int>(uniforms[step] * count)
        if pick > count - 1:
            pick = count - 1
        k = -1
        for v in range(V):
            if z[v] == m:
                if pick == 0:
                    k = v
                    break
                pick -= 1
        tokens_out[step] = k
        logps_out[step] = logp[k]
        length += 1
        if k == END_TOK:
            break
        state = grammar_next(state, k)
        prev = k
    return length


def logprob_grad(const double[:, :] W, const long[:] layout, int cue, int hint, int revealed,
                 const double[:] nuis, const long[:] tokens, double[:] logps_out,
                 grad_out, double coef):
    cdef long idx[MAX_ACTIVE]
    cdef double val[MAX_ACTIVE]
    cdef double z[V]
    cdef double p[V]
    cdef double logp[V]
    cdef double[:, :] G
    cdef bint want_grad = grad_out is not None
    cdef int prev = BOS, state = G_START, step, n, k, v, j
    cdef double total = 0.0, g
    if want_grad:
        G = grad_out
    for step in range(tokens.shape[0]):
        k = tokens[step]
        n = featurize(layout, cue, hint, revealed, nuis, prev, step, state == G_OFF, idx, val)
        _check(dist(W, idx, val, n, z, p, logp))
        logps_out[step] = logp[k]
        total += logp[k]
        if want_grad:
            for v in range(V):
                g = -p[v]
                if v == k:
                    g += 1.0
                g *= coef
                for j in range(n):
                    G[v, idx[j]] += g * val[j]
        state = grammar_next(state, k)
        prev = k
    return total


def kl_path(const double[:, :] Wa, const long[:] layout_a, const double[:, :] Wb,
            const long[:] layout_b, int cue, int hint, int revealed, const double[:] nuis,
            const long[:] tokens, double[:] kl_out, grad_out, double coef, bint wrt_b):
    cdef long ia[MAX_ACTIVE]
    cdef double va[MAX_ACTIVE]
    cdef long ib[MAX_ACTIVE]
    cdef double vb[MAX_ACTIVE]
    cdef double z[V]
    cdef double pa[V]
    cdef double la[V]
    cdef double pb[V]
    cdef double lb[V]
    cdef double[:, :] G
    cdef bint want_grad = grad_out is not None
    cdef int prev = BOS, state = G_START, step, na, nb, v, j
    cdef double total = 0.0, kl, g
    cdef bint inf_kl
    if want_grad:
        G = grad_out
    for step in range(tokens.shape[0]):
        na = featurize(layout_a, cue, hint, revealed, nuis, prev, step, state == G_OFF, ia, va)
        nb = featurize(layout_b, cue, hint, revealed, nuis, prev, step, state == G_OFF, ib, vb)
        _check(dist(Wa, ia, va, na, z, pa, la))
        _check(dist(Wb, ib, vb, nb, z, pb, lb))
        kl = 0.0
        inf_kl = False
        for v in range(V):
            if pa[v] > 0.0:
                if pb[v] == 0.0:
                    inf_kl = True
                else:
                    kl += pa[v] * (la[v] - lb[v])
        if inf_kl:
            kl = INFINITY
        kl_out[step] = kl
        total += kl
        if want_grad and not inf_kl:
            if wrt_b:
                for v in range(V):
                    g = coef * (pb[v] - pa[v])
                    for j in range(nb):
                        G[v, ib[j]] += g * vb[j]
            else:
                for v in range(V):
                    if pa[v] > 0.0:
                        g = coef * pa[v] * ((la[v] - lb[v]) - kl)
                    else:
                        g = -coef * pa[v] * kl
                    for j in range(na):
                        G[v, ia[j]] += g * va[j]
        state = grammar_next(state, tokens[step])
        prev = tokens[step]
    return total
