#!/usr/bin/env python3
"""Benchmark the numba-compiled kernels against their numpy fallbacks.

Runs each hot kernel on representative sizes with both backends and prints a
timing table plus the max deviation between the two results. Force the
fallback path in a real run with VFSYNTH_NUMBA=0; here both code paths are
called directly so one process covers the comparison.
"""

import time

import numpy as np

from vfsynth import kernels as K
from vfsynth.rng import RngStream


def timeit(fn, *args, repeats=5):
    best = float("inf")
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best, out


def bench_jacobi():
    rng = RngStream(0, "bench", "jacobi")
    rows = []
    for d in (16, 64, 128):
        m = rng.normal(d, d)
        a = (m + m.T) / 2
        if K.USING_NUMBA:
            K._jacobi_core(a.copy(), np.eye(d), 1e-12, 100)  # compile
        tol = 1e-12 * max(1.0, float(np.linalg.norm(a)))
        t_jit, _ = timeit(lambda: K._jacobi_core(a.copy(), np.eye(d), tol, 100))
        t_np, _ = timeit(lambda: K._jacobi_core_numpy(a.copy(), np.eye(d), tol, 100))
        w_jit = np.sort(np.diag(_run_core(K._jacobi_core, a, tol)))
        w_np = np.sort(np.diag(_run_core(K._jacobi_core_numpy, a, tol)))
        rows.append((f"jacobi_eigh d={d}", t_jit, t_np, np.abs(w_jit - w_np).max()))
    return rows


def _run_core(core, a, tol):
    work = a.copy()
    core(work, np.eye(a.shape[0]), tol, 100)
    return work


def bench_split():
    rng = RngStream(0, "bench", "split")
    rows = []
    for n, k in ((1000, 4), (5000, 4), (20000, 6)):
        x = rng.normal(n, k)
        y = rng.integers(0, 5, size=n)
        if K.USING_NUMBA:
            K._best_split(x, y, 5)  # compile
        t_jit, r_jit = timeit(lambda: K._best_split(x, y, 5))
        t_np, r_np = timeit(lambda: K._best_split_numpy(x, y, 5))
        dev = abs(r_jit[1] - r_np[1]) + abs(r_jit[0] - r_np[0])
        rows.append((f"best_split n={n} k={k}", t_jit, t_np, dev))
    return rows


def bench_nn_dist():
    rng = RngStream(0, "bench", "nn")
    rows = []
    for n in (200, 1000, 2000):
        cat = np.eye(6)[rng.integers(0, 6, size=n)]
        cont = rng.normal(n, 11)
        if K.USING_NUMBA:
            K._nn_dist(cat, cont, 0.3, 0.7)  # compile
        t_jit, r_jit = timeit(lambda: K._nn_dist(cat, cont, 0.3, 0.7))
        t_np, r_np = timeit(lambda: K._nn_dist_numpy(cat, cont, 0.3, 0.7))
        rows.append((f"nn_distances n={n}", t_jit, t_np, np.abs(r_jit - r_np).max()))
    return rows


def main():
    if not K.USING_NUMBA:
        print("numba unavailable or disabled; both columns run the numpy path")
    header = f"{'kernel':28s} {'numba':>10s} {'numpy':>10s} {'speedup':>8s} {'max dev':>10s}"
    print(header)
    print("-" * len(header))
    for rows in (bench_jacobi(), bench_split(), bench_nn_dist()):
        for name, t_jit, t_np, dev in rows:
            speed = t_np / t_jit if t_jit > 0 else float("inf")
            print(f"{name:28s} {t_jit*1e3:9.2f}ms {t_np*1e3:9.2f}ms "
                  f"{speed:7.1f}x {dev:10.2e}")


if __name__ == "__main__":
    main()
