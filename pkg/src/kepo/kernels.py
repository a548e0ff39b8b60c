"""Kernel backend selection.

The compiled extension is used when it imports; ``KEPO_PURE_PYTHON=1`` forces
the numpy fallback. ``BACKEND`` names the active one.
"""
from __future__ import annotations

import os

from . import _pykernels

if os.environ.get("KEPO_PURE_PYTHON", "") not in ("", "0"):
    _impl = _pykernels
else:
    try:
        from . import _kernels as _impl  # type: ignore[attr-defined]
    except ImportError:
        _impl = _pykernels

BACKEND = "python" if _impl is _pykernels else "cython"

step_probs = _impl.step_probs
sample = _impl.sample
greedy = _impl.greedy
logprob_grad = _impl.logprob_grad
kl_path = _impl.kl_path
