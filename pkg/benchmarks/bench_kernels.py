"""Timing comparison of the compiled Chebyshev-Legendre kernel against the
pure-Python fallback, plus a correctness cross-check.

Usage: python benchmarks/bench_kernels.py [--kmax K] [--lmax L] [--reps N]
"""
import argparse
import time

import numpy as np

from sgfem import kernels
from sgfem._cheb_fallback import triple_product_table as py_table

try:
    from sgfem._cheb_kernel import triple_product_table as cy_table
    HAVE_CYTHON = True
except ImportError:
    cy_table = None
    HAVE_CYTHON = False


def workload(table, zs, kmax, lmax):
    acc = 0.0
    for z in zs:
        for l in range(lmax + 1):
            for lp in range(max(0, l - kmax), min(lmax, l + kmax) + 1):
                acc += table(z, kmax, l, lp)[kmax]
    return acc


def run(table, zs, kmax, lmax, reps):
    best = float("inf")
    for _ in range(reps):
        t0 = time.perf_counter()
        workload(table, zs, kmax, lmax)
        best = min(best, time.perf_counter() - t0)
    return best


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--kmax", type=int, default=8)
    ap.add_argument("--lmax", type=int, default=12)
    ap.add_argument("--nz", type=int, default=50)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    rng = np.random.default_rng(0)
    zs = rng.uniform(-1.0, 1.0, args.nz)

    print(f"active backend: {kernels.BACKEND}")
    print(f"workload: {args.nz} z-values, kmax={args.kmax}, "
          f"lmax={args.lmax}, best of {args.reps}")

    t_py = run(py_table, zs, args.kmax, args.lmax, args.reps)
    print(f"python fallback : {t_py * 1e3:9.2f} ms")
    if not HAVE_CYTHON:
        print("compiled kernel : not built (pip install -e . to build)")
        return

    t_cy = run(cy_table, zs, args.kmax, args.lmax, args.reps)
    print(f"compiled kernel : {t_cy * 1e3:9.2f} ms")
    print(f"speedup         : {t_py / t_cy:9.2f}x")

    worst = 0.0
    for z in zs[:10]:
        for l in range(args.lmax + 1):
            for lp in range(args.lmax + 1):
                a = np.asarray(cy_table(z, args.kmax, l, lp))
                b = np.asarray(py_table(z, args.kmax, l, lp))
                worst = max(worst, float(np.abs(a - b).max()))
    print(f"max |cython - python| over spot checks: {worst:.3e}")
    assert worst < 1e-12, "backend mismatch"


if __name__ == "__main__":
    main()
