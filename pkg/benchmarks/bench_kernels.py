"""Compiled vs pure-Python timings for the hot kernels.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one line per (kernel, size) with the best-of-N time for each
backend, the speedup and the max abs difference between their outputs.
"""
import argparse
import time

import numpy as np

from latentmodes import _kernels_py

try:
    from latentmodes import _kernels
except ImportError:  # no compiled extension in this install
    _kernels = None


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def _diff(a, b):
    if isinstance(a, tuple):
        return max(_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def cases(rng):
    for d in (16, 64, 128):
        A = rng.normal(size=(d, d))
        A = A + A.T
        # eigenvalues only: eigenvector signs are arbitrary
        yield f"jacobi_eigh d={d}", lambda m, A=A: m.jacobi_eigh(A)[0]
    for n in (1000, 4000):
        Q = rng.normal(size=(n, 4))
        R = rng.normal(size=(n, 4))
        yield f"knn_kth_distance n={n}", lambda m, Q=Q, R=R: m.knn_kth_distance(Q, R, 5)
    for s in (32, 64):
        g = rng.uniform(size=(s, s))
        yield f"hog_cells {s}x{s}", lambda m, g=g: m.hog_cells(g, 4, 8)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':<26} {'python s':>10} {'cython s':>10} {'speedup':>8} {'max diff':>10}")
    for name, fn in cases(rng):
        tp, outp = best_of(lambda: fn(_kernels_py), args.repeat)
        if _kernels is None:
            print(f"{name:<26} {tp:10.4f} {'n/a':>10}")
            continue
        tc, outc = best_of(lambda: fn(_kernels), args.repeat)
        print(f"{name:<26} {tp:10.4f} {tc:10.4f} {tp / tc:8.1f}x {_diff(outp, outc):10.2e}")


if __name__ == "__main__":
    main()
