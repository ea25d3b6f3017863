# cython: boundscheck=False, wraparound=False, cdivision=True
"""Cython kernel for the Chebyshev-Legendre product table.

Same contract as sgfem._cheb_fallback.triple_product_table; the matrix
Chebyshev recursion exploits the tridiagonal structure of Z so each step
costs O(n^2) instead of a dense matmul.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def sqrt_beta(k):
    k = np.asarray(k, dtype=float)
    return np.sqrt(1.0 / (4.0 - k ** -2.0))


def triple_product_table(double z, int kmax, int l, int lp):
    if kmax < 0:
        raise ValueError("kmax must be >= 0")
    if l < 0 or lp < 0:
        raise ValueError("Legendre degrees must be >= 0")
    out_arr = np.zeros(kmax + 1)
    cdef double[::1] out = out_arr
    if abs(l - lp) > kmax:
        return out_arr
    cdef int lo = min(l, lp) - kmax
    if lo < 0:
        lo = 0
    cdef int hi = max(l, lp) + kmax
    cdef int n = hi - lo + 1
    cdef int il = l - lo
    cdef int ip = lp - lo
    cdef int i, j, k
    cdef double m
    # off[i] couples local rows (i, i+1): z*sqrt(beta_{lo+i+1})
    off_arr = np.empty(n - 1) if n > 1 else np.empty(0)
    cdef double[::1] off = off_arr
    for i in range(n - 1):
        m = lo + i + 1
        off[i] = z * sqrt(1.0 / (4.0 - 1.0 / (m * m)))

    out[0] = 1.0 if l == lp else 0.0
    if kmax == 0:
        return out_arr

    tp_arr = np.eye(n)
    tc_arr = np.zeros((n, n))
    tn_arr = np.zeros((n, n))
    cdef double[:, ::1] tp = tp_arr
    cdef double[:, ::1] tc = tc_arr
    cdef double[:, ::1] tn = tn_arr
    cdef double[:, ::1] tmp
    for i in range(n - 1):
        tc[i, i + 1] = off[i]
        tc[i + 1, i] = off[i]
    out[1] = tc[il, ip]
    cdef double acc
    for k in range(2, kmax + 1):
        for i in range(n):
            for j in range(n):
                acc = 0.0
                if i > 0:
                    acc += off[i - 1] * tc[i - 1, j]
                if i < n - 1:
                    acc += off[i] * tc[i + 1, j]
                tn[i, j] = 2.0 * acc - tp[i, j]
        tmp = tp
        tp = tc
        tc = tn
        tn = tmp
        out[k] = tc[il, ip]
    return out_arr
