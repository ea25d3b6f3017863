import numpy as np
import numpy.polynomial.chebyshev as cheb
import pytest
from numpy.polynomial.legendre import leggauss, legval

from sgfem import kernels
from sgfem._cheb_fallback import triple_product_table as py_table


def legendre_orthonormal(n, x):
    c = np.zeros(n + 1)
    c[n] = 1.0
    return legval(x, c) * np.sqrt(2 * n + 1)


def quad_oracle(z, k, l, lp, npts=50):
    y, w = leggauss(npts)
    ck = np.zeros(k + 1)
    ck[k] = 1.0
    vals = cheb.chebval(z * y, ck) * legendre_orthonormal(l, y) \
        * legendre_orthonormal(lp, y)
    return 0.5 * np.sum(w * vals)


def test_beta_value():
    assert kernels.beta(1) == pytest.approx(1.0 / 3.0, abs=1e-15)
    assert kernels.triple_product(1.0, 1, 0, 1) == pytest.approx(
        1.0 / np.sqrt(3.0), abs=1e-14)


def test_k0_is_delta():
    for l in range(6):
        for lp in range(6):
            v = kernels.triple_product(0.7, 0, l, lp)
            assert v == (1.0 if l == lp else 0.0)


def test_orthogonality_cutoff_exact_zero():
    for k in range(5):
        for l in range(8):
            for lp in range(8):
                if abs(l - lp) > k:
                    assert kernels.triple_product(0.9, k, l, lp) == 0.0


def test_against_quadrature_sample():
    rng = np.random.default_rng(7)
    for _ in range(60):
        z = rng.uniform(-1, 1)
        k = rng.integers(0, 7)
        l = rng.integers(0, 9)
        lp = rng.integers(max(0, l - k), l + k + 1)
        got = kernels.triple_product(z, k, l, lp)
        want = quad_oracle(z, k, l, lp)
        assert got == pytest.approx(want, abs=1e-11)


def test_spec_value_example():
    # k=1, l=0, lp=1, z=0.5 -> z*sqrt(beta_1) = 0.5/sqrt(3)
    assert kernels.triple_product(0.5, 1, 0, 1) == pytest.approx(
        0.5 / np.sqrt(3.0), abs=1e-14)


def test_backends_agree():
    rng = np.random.default_rng(3)
    for _ in range(30):
        z = rng.uniform(-1, 1)
        l = rng.integers(0, 10)
        lp = rng.integers(0, 10)
        a = kernels.triple_product_table(z, 8, l, lp)
        b = py_table(z, 8, l, lp)
        np.testing.assert_allclose(a, b, atol=1e-14)


def test_table_matches_singles():
    tab = kernels.triple_product_table(0.4, 6, 3, 5)
    for k in range(7):
        assert tab[k] == kernels.triple_product(0.4, k, 3, 5)


def test_invalid_args():
    with pytest.raises(ValueError):
        kernels.triple_product(0.5, -1, 0, 0)
