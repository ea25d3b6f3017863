"""Pure numpy implementation of the Chebyshev-Legendre product kernel.

Computes the interaction integrals

    c_k = int_{-1}^{1} T_k(z*y) L_l(y) L_lp(y) dsigma(y),   dsigma = dy/2,

for all k = 0..kmax at once, where L_n are the sigma-orthonormal Legendre
polynomials.  The integral equals the (l, lp) entry of T_k(Z) for the
tridiagonal section Z of the multiply-by-(z*y) operator in the Legendre
basis, so a single matrix-valued Chebyshev three-term recursion yields the
whole k-range.

The tridiagonal section spans Legendre degrees max(0, l-kmax)..l+kmax.
Rows of negative degree are truncated (polynomials of negative degree are
zero); the truncation at the top of the window cannot influence the (l, lp)
entry for k <= kmax (a coupling walk would need more than k steps to reach
the boundary and return).
"""
import numpy as np


def sqrt_beta(k):
    """sqrt(beta_k) with beta_k = (4 - k^-2)^-1, the Legendre recursion weight.

    Accepts scalars or arrays; k must be >= 1.
    """
    k = np.asarray(k, dtype=float)
    return np.sqrt(1.0 / (4.0 - k ** -2.0))


def triple_product_table(z, kmax, l, lp):
    """Return array c[0..kmax] with c[k] = int T_k(z*y) L_l L_lp dsigma."""
    if kmax < 0:
        raise ValueError("kmax must be >= 0")
    if l < 0 or lp < 0:
        raise ValueError("Legendre degrees must be >= 0")
    out = np.zeros(kmax + 1)
    if abs(l - lp) > kmax:
        return out
    lo = max(0, min(l, lp) - kmax)
    hi = max(l, lp) + kmax
    n = hi - lo + 1
    # off-diagonal entries couple degrees (m-1, m) with weight z*sqrt(beta_m)
    off = z * sqrt_beta(np.arange(lo + 1, hi + 1))
    Z = np.diag(off, 1) + np.diag(off, -1)
    il, ip = l - lo, lp - lo
    out[0] = 1.0 if l == lp else 0.0
    if kmax == 0:
        return out
    Tprev = np.eye(n)
    Tcur = Z
    out[1] = Tcur[il, ip]
    for k in range(2, kmax + 1):
        Tnext = 2.0 * (Z @ Tcur) - Tprev
        Tprev, Tcur = Tcur, Tnext
        out[k] = Tcur[il, ip]
    return out
