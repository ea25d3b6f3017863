import itertools
import math

import numpy as np
import pytest
import scipy.special
from numpy.polynomial import legendre

from sgfem.compress import (
    ChebCoefficientTable, apply_mode, bessel_i, build_scheme_affine,
    build_scheme_nonlinear, cheb_block_coefficients, cheb_exp_coefficients,
    exp_certificate, interaction_support,
)
from sgfem.fem import (
    P1Function, PiecewisePolyCoefficient, assemble_stiffness, dual_pair,
    interval_quadrature, prolong, residual_from_flux,
)
from sgfem.fields import (
    Parametrization, build_haar_multilevel, build_hat_multilevel,
)
from sgfem.indices import LevelBlockIndex, ParamIndex, ZERO_BLOCK, ZERO_INDEX
from sgfem.kernels import beta
from sgfem.mesh import uniform_mesh, vcoord


def legendre_bar(n, y):
    """Orthonormal Legendre polynomial wrt the uniform measure on [-1,1]."""
    c = np.zeros(n + 1)
    c[n] = 1.0
    return legendre.legval(y, c) * np.sqrt(2 * n + 1)


def test_bessel_series_vs_scipy():
    for k in range(8):
        for c in (0.0, 0.1, 0.5, 1.0, -0.7, 2.5):
            want = float(scipy.special.iv(k, c))
            assert bessel_i(k, c) == pytest.approx(want, abs=1e-14, rel=1e-13)


def test_cheb_exp_zero():
    f = cheb_exp_coefficients(0.0, 5)
    assert f[0] == 1.0
    assert np.all(f[1:] == 0.0)


def test_cheb_exp_reconstruction():
    for c in (0.3, 1.0, -1.5):
        kmax = 20
        f = cheb_exp_coefficients(c, kmax)
        z = np.linspace(-1, 1, 501)
        rec = sum(f[k] * np.cos(k * np.arccos(z)) for k in range(kmax + 1))
        tail = 2 * sum(bessel_i(k, c) for k in range(kmax + 1, kmax + 40))
        assert np.abs(rec - np.exp(c * z)).max() <= tail + 1e-14


def test_block_coefficients_exp_single_level():
    # tensor quadrature must reproduce the Bessel closed form
    c = 0.6
    blocks = [ZERO_BLOCK] + [LevelBlockIndex([(0, k)]) for k in (1, 2, 3)]
    tab = cheb_block_coefficients(np.exp, {0: c}, blocks,
                                  M=bessel_i(0, c), rho=2 / c, alpha_prime=1.0)
    assert tab.coeffs[ZERO_BLOCK] == pytest.approx(bessel_i(0, c), rel=1e-12)
    for k in (1, 2, 3):
        assert tab.coeffs[LevelBlockIndex([(0, k)])] == pytest.approx(
            2 * bessel_i(k, c), rel=1e-11)


def test_block_coefficients_linear_f():
    blocks = [ZERO_BLOCK, LevelBlockIndex([(0, 1)]), LevelBlockIndex([(0, 2)]),
              LevelBlockIndex([(0, 1), (1, 1)]), LevelBlockIndex([(1, 3)])]
    tab = cheb_block_coefficients(lambda z: z, {0: 0.5, 1: 0.25}, blocks,
                                  M=1.0, rho=2.0, alpha_prime=1.0)
    for k, fk in tab.coeffs.items():
        if k.order >= 2:
            assert abs(fk) < 1e-14, k


def test_decay_check_raises():
    bad = {LevelBlockIndex([(0, 3)]): 1.0}  # way above a tiny envelope
    with pytest.raises(ValueError):
        ChebCoefficientTable(bad, M=1e-6, rho=4.0, alpha_prime=1.0)


def test_table_dump_format():
    tab = ChebCoefficientTable({ZERO_BLOCK: 1.0}, 2.0, 2.0, 1.0)
    line = tab.dump().splitlines()[0]
    assert line.count("|") == 2


def test_exp_envelope_holds():
    field = build_haar_multilevel(1, 1.0, 2, 0.4, kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    tab = s.table(4)
    for k, fk in tab.coeffs.items():
        assert abs(fk) <= tab.envelope(k) * (1 + 1e-12), k


def test_affine_scheme_basics():
    field = build_haar_multilevel(1, 1.0, 2, 0.3)
    s = build_scheme_affine(field, Parametrization.affine())
    assert s.cost(0) == 1
    assert s.out_modes(ZERO_INDEX, 0) == [ZERO_INDEX]
    # single-term field fully resolved at n = 1
    single = build_haar_multilevel(1, 1.0, 0, 0.3)
    s1 = build_scheme_affine(single, Parametrization.affine())
    assert s1.schur_remainder(1) == 0.0


def test_affine_scheme_rejects_other_kinds():
    field = build_haar_multilevel(1, 1.0, 1, 0.3, kind="logaffine")
    with pytest.raises(ValueError):
        build_scheme_affine(field, Parametrization.logaffine())


def test_affine_schur_decay_slope():
    field = build_haar_multilevel(1, 1.0, 6, 0.3)
    s = build_scheme_affine(field, Parametrization.affine())
    ns = np.arange(1, 7)
    rems = [s.schur_remainder(n) for n in ns]
    slope = np.polyfit(ns, np.log2(rems), 1)[0]
    assert slope <= -0.9


def test_affine_apply_single_theta():
    # one level-0 theta: B_1 (v (x) L_0) = theta0 grad v on mode 0 and
    # sqrt(beta_1) theta grad v on mode e_mu
    field = build_haar_multilevel(1, 1.0, 0, 0.4)
    s = build_scheme_affine(field, Parametrization.affine())
    m = uniform_mesh(1, 2)
    rng = np.random.default_rng(0)
    v = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    out = apply_mode(s, 1, v, ZERO_INDEX)
    lab = next(field.all_thetas()).label
    assert out.modes() == [ZERO_INDEX, ParamIndex([(lab, 1)])]
    w = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    om = out.mesh
    wf, vf = prolong(w, om), prolong(v, om)
    th = field.theta_by_label(lab)
    for nup, scale, cval in ((ZERO_INDEX, 1.0, field.theta0),
                             (ParamIndex([(lab, 1)]),
                              math.sqrt(beta(1)), th(0.1))):
        xi = residual_from_flux(None, out.fluxes[nup], om)
        lhs = -dual_pair(xi, wf)
        A = assemble_stiffness(
            PiecewisePolyCoefficient.constant(om, cval), om)
        assert lhs == pytest.approx(scale * float(wf.nodal @ (A @ vf.nodal)),
                                    abs=1e-12)


def test_nonlinear_budget_one_is_mean_field():
    field = build_haar_multilevel(1, 1.0, 1, 0.3, kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    assert s.blocks(0) == [ZERO_BLOCK]
    m = uniform_mesh(1, 1)
    v = P1Function(m, np.ones(len(m.interior_vertices)))
    out = apply_mode(s, 0, v, ZERO_INDEX)
    assert out.modes() == [ZERO_INDEX]


def test_nonlinear_requires_certificate():
    field = build_haar_multilevel(1, 1.0, 1, 0.3, kind="logaffine")
    with pytest.raises(ValueError):
        build_scheme_nonlinear(field, Parametrization("analytic",
                                                      f=np.exp))


def test_logaffine_coefficient_vs_quadrature():
    # exp factorizes over expansion functions, so the oracle is a product
    # of 1D Gauss-Legendre integrals of e^{y theta(x)} L_i L_j
    field = build_haar_multilevel(1, 1.0, 1, 0.4, theta0=0.3,
                                  kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    labs = [th.label for th in field.all_thetas()]
    thetas = {th.label: th for th in field.all_thetas()}
    gx, gw = np.polynomial.legendre.leggauss(60)
    gw = gw / 2.0
    for x in (0.13, 0.61, 0.87):
        for combo in itertools.product(range(3), repeat=3):
            for combo2 in itertools.product(range(3), repeat=3):
                nu = ParamIndex([(labs[i], combo[i]) for i in range(3)])
                nup = ParamIndex([(labs[i], combo2[i]) for i in range(3)])
                want = np.exp(field.theta0)
                for i, lab in enumerate(labs):
                    tv = thetas[lab](x)
                    want *= float(np.sum(
                        gw * np.exp(gx * tv) * legendre_bar(combo[i], gx)
                        * legendre_bar(combo2[i], gx)))
                assert s.coefficient(nu, nup, x) == pytest.approx(
                    want, abs=1e-12)


def test_block_sum_converges_to_exact():
    field = build_haar_multilevel(1, 1.0, 1, 0.3, theta0=0.2,
                                  kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    lab = sorted(th.label for th in field.all_thetas())[1]
    nu = ParamIndex([(lab, 1)])
    exact = s.coefficient(nu, nu, 0.3)
    errs = [abs(s.coefficient(nu, nu, 0.3, n=n) - exact) for n in range(9)]
    assert errs[-1] < 1e-7
    assert all(a >= b - 1e-15 for a, b in zip(errs, errs[1:]))


@pytest.mark.parametrize("dim", [1, 2])
def test_nonlinear_apply_matches_coefficient(dim):
    # pairing of the produced fluxes == stiffness assembled from the
    # block-truncated coefficient evaluated per cell
    field = build_haar_multilevel(dim, 1.0, 1, 0.3, theta0=0.2,
                                  kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    m = uniform_mesh(dim, 1)
    rng = np.random.default_rng(1)
    v = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    w = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    labs = [th.label for th in field.all_thetas()]
    nu = ParamIndex([(labs[1], 1)])
    n = 3
    out = apply_mode(s, n, v, nu)
    om = out.mesh
    wf, vf = prolong(w, om), prolong(v, om)
    for nup in out.modes():
        xi = residual_from_flux(None, out.fluxes[nup], om)
        lhs = -dual_pair(xi, wf)
        polys = {}
        for e in om.leaves:
            c = np.mean([vcoord(vv) for vv in om.verts(e)], axis=0)
            val = s.coefficient(nu, nup, c[0], c[1] if dim == 2 else 0.0,
                                n=n)
            polys[e] = np.array([val]) if dim == 1 else np.array([[val]])
        A = assemble_stiffness(PiecewisePolyCoefficient(om, polys), om)
        assert lhs == pytest.approx(float(wf.nodal @ (A @ vf.nodal)),
                                    abs=1e-12)


def test_hat_field_apply_with_overlaps():
    # m = 1 field with 2-coloring and coverage gaps: the flux polynomials
    # are genuinely piecewise linear; oracle integrates the pointwise
    # coefficient with Gauss quadrature
    field = build_hat_multilevel(1.0, 2, 0.5, theta0=0.0, kind="logaffine")
    assert field.Q == 2
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    m = uniform_mesh(1, 2)
    rng = np.random.default_rng(3)
    v = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    w = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    labs = sorted(th.label for th in field.all_thetas())
    nu = ParamIndex([(labs[2], 1)])
    n = 3
    out = apply_mode(s, n, v, nu)
    om = out.mesh
    wf, vf = prolong(w, om), prolong(v, om)
    for nup in out.modes():
        xi = residual_from_flux(None, out.fluxes[nup], om)
        lhs = -dual_pair(xi, wf)
        rhs = 0.0
        for e in om.leaves:
            cs = sorted(vcoord(vv)[0] for vv in om.verts(e))
            gv = vf.gradient_on(e)[0]
            gw_ = wf.gradient_on(e)[0]
            xq, wq = interval_quadrature(cs[0], cs[1], 10)
            rhs += gv * gw_ * sum(
                ww * s.coefficient(nu, nup, xx, n=n)
                for xx, ww in zip(xq, wq))
        assert lhs == pytest.approx(rhs, abs=1e-12)


def test_pairing_symmetry():
    field = build_haar_multilevel(1, 1.0, 1, 0.3, kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    m = uniform_mesh(1, 2)
    rng = np.random.default_rng(5)
    v = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    w = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    labs = [th.label for th in field.all_thetas()]
    nu = ParamIndex([(labs[0], 1)])
    nup = ParamIndex([(labs[0], 2), (labs[1], 1)])
    n = 4
    gv = apply_mode(s, n, v, nu)
    gw = apply_mode(s, n, w, nup)

    def pair(out, other, mode):
        if mode not in out.fluxes:
            return 0.0
        xi = residual_from_flux(None, out.fluxes[mode], out.mesh)
        return -dual_pair(xi, prolong(other, out.mesh))

    assert pair(gv, w, nup) == pytest.approx(pair(gw, v, nu), abs=1e-12)


def test_schur_bound_validity():
    # || B_K (v (x) L_nu) ||_{V'} <= cellwise Schur max * |v|_{H1}
    field = build_haar_multilevel(1, 1.0, 1, 0.3, theta0=1.0,
                                  kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    m = uniform_mesh(1, 3)
    rng = np.random.default_rng(7)
    from sgfem.fem import h1_seminorm
    labs = [th.label for th in field.all_thetas()]
    nu = ParamIndex([(labs[0], 1)])
    n = 3
    v = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    out = apply_mode(s, n, v, nu)
    # dual norm of each mode output via the Riesz problem on a fine mesh
    import scipy.sparse.linalg as spla
    om = out.mesh
    A = assemble_stiffness(PiecewisePolyCoefficient.constant(om, 1.0), om)
    total = 0.0
    for nup in out.modes():
        xi = residual_from_flux(None, out.fluxes[nup], om)
        b = np.array([dual_pair(xi, P1Function(om, e)) for e in
                      np.eye(len(om.interior_vertices))])
        z = spla.spsolve(A.tocsc(), b)
        total += float(b @ z)
    # Schur bound: max_x sum_{nu'} |[a]_{nu nu'}(x)| over cell centers
    schur = 0.0
    for e in om.leaves:
        c = np.mean([vcoord(vv) for vv in om.verts(e)], axis=0)
        schur = max(schur, sum(abs(s.coefficient(nu, nup, c[0], n=n))
                               for nup in out.modes()))
    assert np.sqrt(total) <= schur * h1_seminorm(v) * (1 + 1e-10)


def test_legendre_interaction_decay_bound():
    # |int e^{cy} L_k L_k' dsigma| <= 2 max_{E_rho}|e^{c.}| rho^2/(rho^2-1)
    #                                 rho^{-(k-k')}
    gx, gw = np.polynomial.legendre.leggauss(80)
    gw = gw / 2.0
    for c in (0.25, 0.5, 1.0):
        for rho in (2.0, 4.0):
            mx = np.exp(c * 0.5 * (rho + 1.0 / rho))  # max on the ellipse
            const = 2.0 * mx * rho ** 2 / (rho ** 2 - 1.0)
            for kp in range(3):
                for k in range(kp, kp + 11):
                    val = float(np.sum(gw * np.exp(c * gx)
                                       * legendre_bar(k, gx)
                                       * legendre_bar(kp, gx)))
                    assert abs(val) <= const * rho ** (-(k - kp)) + 1e-14


def test_interaction_support_covers_output():
    field = build_haar_multilevel(1, 1.0, 1, 0.3, kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    m = uniform_mesh(1, 1)
    rng = np.random.default_rng(9)
    v = P1Function(m, rng.standard_normal(len(m.interior_vertices)))
    labs = [th.label for th in field.all_thetas()]
    nu = ParamIndex([(labs[2], 1)])
    for n in (1, 2, 3):
        out = apply_mode(s, n, v, nu)
        assert set(out.modes()) <= set(interaction_support(s, nu, n))


def test_cost_and_compr_constants():
    field = build_haar_multilevel(1, 1.0, 2, 0.3, kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    assert s.C_cost > 0 and s.C_compr > 0
    from sgfem.indices import weight_b
    for n in (0, 2, 4):
        cost = sum(weight_b(k, s.weights) for k in s.blocks(n))
        assert cost <= s.C_cost * 2.0 ** (s.dim * n) + 1e-12


def test_envelope_tail_decreasing():
    field = build_haar_multilevel(1, 1.0, 2, 0.3, kind="logaffine")
    s = build_scheme_nonlinear(field, Parametrization.logaffine())
    tails = [s.envelope_tail(s.blocks(n)) for n in range(6)]
    assert all(a >= b - 1e-15 for a, b in zip(tails, tails[1:]))
    assert tails[-1] < tails[0]


def test_analytic_scheme_general_f():
    # analytic parametrization f(z) = 1/(2 + z) with a generous certificate
    field = build_haar_multilevel(1, 1.0, 1, 0.25)
    param = Parametrization.analytic(lambda z: 1.0 / (2.0 + z),
                                     M=4.0, rho=2.0, alpha_prime=0.5)
    s = build_scheme_nonlinear(field, param)
    # block-truncated coefficient approaches the tensor quadrature oracle
    labs = [th.label for th in field.all_thetas()]
    thetas = {th.label: th for th in field.all_thetas()}
    nu = ParamIndex([(labs[0], 1)])
    x = 0.3
    gx, gw = np.polynomial.legendre.leggauss(40)
    gw = gw / 2.0
    # oracle: 2 active vars at x = 0.3 (labels at levels 0 and 1)
    active = [lab for lab in labs if abs(thetas[lab](x)) > 0]
    want = 0.0
    for i, yi in enumerate(gx):
        for j, yj in enumerate(gx):
            germ = yi * thetas[active[0]](x) + yj * thetas[active[1]](x)
            w = param.f(germ) * gw[i] * gw[j]
            w *= legendre_bar(nu.get(active[0]), yi) ** 1 \
                * legendre_bar(0, yi) * legendre_bar(nu.get(active[1]), yj) \
                * legendre_bar(0, yj)
            want += w
    got = s.coefficient(nu, ZERO_INDEX, x, n=6)
    assert got == pytest.approx(want, abs=1e-6)
