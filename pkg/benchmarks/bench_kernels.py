"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--steps 20]

Kernel timings call both modules directly. The end-to-end number runs a short
training job in a subprocess per backend, since the backend is fixed at import.
"""
from __future__ import annotations

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from kepo import _pykernels, env
from kepo.policy import make_base_policy, make_teacher

try:
    from kepo import _kernels
except ImportError:  # extension not built
    _kernels = None

E2E = """
import time
from kepo import env, kernels
from kepo.trainer import TrainConfig, train_run
ts = env.make_task_set(0, 640, 100, 2, cliff_mode=True)
t0 = time.perf_counter()
train_run(ts, TrainConfig(method="kepo", seed=0, steps={steps}))
print(kernels.BACKEND, time.perf_counter() - t0)
"""


def _cases():
    rng = np.random.default_rng(0)
    ts = env.make_task_set(0, 4, 2, 1, cliff_mode=True)
    student = make_base_policy(format_prior=1.0)
    student.weights += rng.normal(0, 0.3, student.weights.shape)
    teacher = make_teacher(ts, 5.0)
    nuis = np.tanh(rng.normal(0, 0.5, env.N_NUISANCE))
    toks = np.array([0, 8, 1, 2, 4, 3, 22], dtype=np.int64)
    u = rng.random(env.MAX_LEN)

    def sample(mod):
        out_t = np.empty(env.MAX_LEN, dtype=np.int64)
        out_l = np.empty(env.MAX_LEN)
        return lambda: mod.sample(student.weights, student.layout, 1, -1, -1, nuis, u, out_t, out_l)

    def logprob_grad(mod):
        lp = np.empty(len(toks))
        g = np.zeros_like(student.weights)
        return lambda: mod.logprob_grad(student.weights, student.layout, 1, -1, -1, nuis, toks, lp, g, 1.0)

    def kl_path(mod):
        kl = np.empty(len(toks))
        g = np.zeros_like(student.weights)
        return lambda: mod.kl_path(teacher.weights, teacher.layout, student.weights, student.layout,
                                   1, -1, -1, nuis, toks, kl, g, 1.0, True)

    return {"sample": sample, "logprob_grad": logprob_grad, "kl_path": kl_path}


def _best(fn, repeat: int) -> float:
    n, _ = timeit.Timer(fn).autorange()
    return min(timeit.repeat(fn, number=n, repeat=repeat)) / n


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--steps", type=int, default=20, help="training steps for the end-to-end timing")
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled extension not available; build it with `pip install -e .`")
        return 1
    print(f"{'kernel':<14}{'cython (us)':>14}{'python (us)':>14}{'speedup':>10}")
    for name, make in _cases().items():
        fast = _best(make(_kernels), args.repeat) * 1e6
        slow = _best(make(_pykernels), args.repeat) * 1e6
        print(f"{name:<14}{fast:>14.2f}{slow:>14.2f}{slow / fast:>9.1f}x")

    times = {}
    for pure in ("0", "1"):
        envvars = dict(os.environ, KEPO_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", E2E.format(steps=args.steps)], env=envvars,
                             capture_output=True, text=True, check=True).stdout.split()
        times[out[0]] = float(out[1])
    print(f"\n{args.steps}-step kepo run: cython {times['cython']:.2f}s, python {times['python']:.2f}s "
          f"({times['python'] / times['cython']:.1f}x)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
