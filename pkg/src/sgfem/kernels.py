"""Kernel dispatch: compiled Chebyshev-Legendre kernel with numpy fallback.

`BACKEND` reports which implementation is active ("cython" or "python").
Both expose the same `triple_product_table(z, kmax, l, lp)` contract and are
benchmarked against each other in benchmarks/bench_kernels.py.
"""
import numpy as np

try:
    from ._cheb_kernel import triple_product_table as _table
    BACKEND = "cython"
except ImportError:  # extension not built; pure python fallback
    from ._cheb_fallback import triple_product_table as _table
    BACKEND = "python"

from ._cheb_fallback import sqrt_beta  # noqa: F401  (re-export)


def beta(k):
    """Legendre three-term recursion weight beta_k = (4 - k^-2)^-1, k >= 1."""
    k = np.asarray(k, dtype=float)
    return 1.0 / (4.0 - k ** -2.0)


def triple_product_table(z, kmax, l, lp):
    """All integrals int T_k(z*y) L_l(y) L_lp(y) dsigma for k = 0..kmax."""
    return _table(float(z), int(kmax), int(l), int(lp))


def triple_product(z, k, l, lp):
    """Single integral int T_k(z*y) L_l(y) L_lp(y) dsigma.

    Returns 0 exactly when |l - lp| > k (orthogonality cutoff).
    """
    if k < 0:
        raise ValueError("k must be >= 0")
    if abs(l - lp) > k:
        return 0.0
    return float(_table(float(z), int(k), int(l), int(lp))[k])
