import numpy as np
import pytest

from sgfem.fields import (
    Parametrization, build_haar_multilevel, build_hat_multilevel,
    ellipticity_bounds, evaluate_a,
)


def test_haar_counts():
    field = build_haar_multilevel(1, 1.0, 2, 0.4)
    assert [len(field.levels[l]) for l in range(3)] == [1, 2, 4]
    field2 = build_haar_multilevel(2, 1.0, 1, 0.3)
    assert [len(field2.levels[l]) for l in range(2)] == [1, 4]


def test_haar_sup_norms_exact():
    field = build_haar_multilevel(2, 1.0, 2, 0.3)
    for lvl, ths in field.levels.items():
        for th in ths:
            assert th.sup_abs(2) == pytest.approx(0.3 * 2.0 ** (-lvl))


def test_haar_coloring_trivial():
    field = build_haar_multilevel(1, 1.0, 2, 0.4)
    assert field.Q == 1
    for th in field.all_thetas():
        assert th.qlevel == th.level


def test_hat_coloring_two_colors():
    field = build_hat_multilevel(1.0, 3, 0.2)
    assert field.Q == 2
    # same-qlevel disjointness is enforced by the constructor; also check
    # the decay-exponent fit recorded by validation
    assert field.validation["decay_exponent"] == pytest.approx(1.0, abs=0.01)


def test_ellipticity_affine_example():
    field = build_haar_multilevel(1, 1.0, 0, 0.5)
    eb = ellipticity_bounds(field, Parametrization.affine())
    assert eb.cB == pytest.approx(0.5)
    assert eb.CB == pytest.approx(1.5)
    # affine invariant CB <= 2||theta0||_inf - cB
    assert eb.CB <= 2 * 1.0 - eb.cB + 1e-12


def test_ellipticity_logaffine_example():
    field = build_haar_multilevel(1, 1.0, 0, 0.5)
    eb = ellipticity_bounds(field, Parametrization.logaffine())
    assert eb.cB == pytest.approx(np.exp(0.5))
    assert eb.CB == pytest.approx(np.exp(1.5))
    assert eb.CB <= np.exp(2 * 1.0) / eb.cB + 1e-9


def test_ellipticity_violation_raises():
    with pytest.raises(ValueError):
        build_haar_multilevel(1, 1.0, 2, 0.7)  # 0.7*(1+.5+.25) > 1


def test_evaluate_a_affine_mean():
    field = build_haar_multilevel(1, 1.0, 1, 0.4)
    assert evaluate_a(field, Parametrization.affine(), 0.3, {}) == 1.0


def test_evaluate_a_logaffine():
    field = build_haar_multilevel(1, 1.0, 0, 0.5, theta0=0.0,
                                  kind="logaffine")
    th = field.levels[0][0]
    val = evaluate_a(field, Parametrization.logaffine(), 0.3,
                     {th.label: 1.0})
    assert val == pytest.approx(np.exp(th(0.3)))


def test_evaluate_a_analytic():
    field = build_haar_multilevel(1, 1.0, 0, 0.5, theta0=0.0,
                                  kind="logaffine")
    th = field.levels[0][0]
    param = Parametrization.analytic(lambda z: 1.0 / (2.0 + z),
                                     M=1.0, rho=2.0, alpha_prime=0.9)
    val = evaluate_a(field, param, 0.3, {th.label: 1.0})
    assert val == pytest.approx(1.0 / (2.0 + th(0.3)))
    # spec's concrete value for theta = +0.5 on the cell
    if th(0.3) > 0:
        assert val == pytest.approx(0.4)


def test_level_sum_decay_property():
    field = build_haar_multilevel(1, 1.0, 3, 0.4)
    for q in range(field.max_qlevel + 1):
        s = max(field.abs_qlevel_sum_at(q, x)
                for x in np.linspace(0.01, 0.99, 64))
        assert s <= 0.4 * 2.0 ** (-(field.alpha / field.Q) * q) + 1e-12


def test_support_chains_haar():
    field = build_haar_multilevel(1, 1.0, 2, 0.4)
    chains = field.support_chains((0, 2))
    # 4 fine cells, each with the unique level-0 and level-2 ancestors
    assert len(chains) == 4
    for chain in chains:
        assert chain[0].level == 0 and chain[1].level == 2


def test_hat_field_positive_somewhere():
    field = build_hat_multilevel(1.0, 2, 0.2)
    th = field.levels[1][0]  # hat at x = 1/2^1 * 1 = 0.5
    assert th(0.25) == pytest.approx(0.1 * 0.5)  # halfway up, amp=0.2*2^-1
