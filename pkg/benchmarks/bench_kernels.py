"""Time the hot kernels under both backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--quick]

Each kernel runs on identical inputs with numba and with the interpreted
fallback; the table reports the best wall time of ``N`` runs and checks that
both backends return the same answer.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sptransduct import kernels
from sptransduct._accel import NUMBA_AVAILABLE, use_backend
from sptransduct.data_lab import rng_stream
from sptransduct.jm_debias import JmSolver


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def lasso_case(n, p):
    rng = rng_stream(0, "bench", "lasso", p)
    X = rng.standard_normal((n, p))
    y = X[:, :5] @ np.ones(5) + rng.standard_normal(n)
    G, c = X.T @ X / n, X.T @ y / n
    lam = 4 * np.sqrt(np.log(p) / n)

    def run():
        beta = np.zeros(p)
        kernels.lasso_cd_gram(G, c, lam, 0.0, beta, 100_000, 1e-10, 1e-8)
        return beta

    return f"lasso_cd_gram n={n} p={p}", run


def admm_case(n, p):
    rng = rng_stream(0, "bench", "admm", p)
    X = rng.standard_normal((n, p))
    x = rng.standard_normal(p)
    solver = JmSolver(X, method="admm")
    lam = np.sqrt(np.log(p) / n)

    def run():
        return solver.solve(x, lam).w

    return f"jm ADMM n={n} p={p}", run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--quick", action="store_true", help="small sizes only")
    args = ap.parse_args(argv)
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    sizes = [(200, 50)] if args.quick else [(200, 50), (800, 200), (1600, 400)]
    cases = [make(n, p) for n, p in sizes for make in (lasso_case, admm_case)]
    print(f"{'kernel':<32} {'numba ms':>10} {'numpy ms':>10} {'speedup':>9} {'max |diff|':>11}")
    for label, run in cases:
        with use_backend("numba"):
            run()  # compile outside the timed region
            t_jit, a = _best(run, args.repeat)
        with use_backend("numpy"):
            t_py, b = _best(run, max(1, args.repeat // 3))
        print(f"{label:<32} {1e3 * t_jit:>10.3f} {1e3 * t_py:>10.3f} {t_py / t_jit:>8.1f}x {np.max(np.abs(a - b)):>11.2e}")


if __name__ == "__main__":
    main()
