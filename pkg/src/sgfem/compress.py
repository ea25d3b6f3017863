"""Compressed applications of the parametric diffusion operator.

Affine fields are truncated by raw expansion level and applied through the
Legendre three-term recursion.  Log-affine and analytic fields expand the
coefficient in tensorized Chebyshev polynomials, one variable per colored
expansion level (scaled so the substituted argument stays in [-1, 1]); the
retained level blocks k are chosen greedily by the reference weights a_k
under a b_k cost budget.  Both schemes can apply themselves to a single-mode
function v (x) L_nu, producing per-mode flux polynomials.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .fem import PiecewiseFlux, PiecewisePolyCoefficient, prolong
from .fields import point_box
from .indices import (InteractionWeights, LevelBlockIndex, ParamIndex,
                      ZERO_BLOCK, greedy_block_sequence, weight_b)
from .kernels import beta, triple_product, triple_product_table
from .mesh import element_verts, overlay, uniform_mesh, vcoord


def _coords(dim, eid):
    return np.array([vcoord(v) for v in element_verts(dim, eid)])


# ---------------------------------------------------------------------------
# modified Bessel functions and Chebyshev coefficients of exp


def bessel_i(k, c):
    """I_k(c) by power series, relative accuracy ~1e-14 (|c| moderate)."""
    if k < 0:
        raise ValueError("order must be >= 0")
    c = float(c)
    half = 0.5 * abs(c)
    term = half ** k / math.factorial(k)
    total = term
    m = 0
    while term > 1e-17 * total or m < half:
        term *= half * half / ((m + 1) * (m + k + 1))
        total += term
        m += 1
        if m > 10000:
            raise RuntimeError("Bessel series did not converge")
    if c < 0 and k % 2 == 1:
        total = -total
    return total


def cheb_exp_coefficients(c, kmax):
    """Chebyshev coefficients of z -> e^{cz} on [-1, 1]:
    f_0 = I_0(c), f_k = 2 I_k(c)."""
    out = np.empty(kmax + 1)
    out[0] = bessel_i(0, c)
    for k in range(1, kmax + 1):
        out[k] = 2.0 * bessel_i(k, c)
    return out


# ---------------------------------------------------------------------------
# block coefficient tables


class ChebCoefficientTable:
    """Map level-block k -> Chebyshev coefficient f_k, with the analyticity
    certificate (M, rho, alpha') that bounds every entry by the envelope
    2^{#active} M prod_l 2^{-alpha' l k_l} rho^{-k_l}."""

    def __init__(self, coeffs, M, rho, alpha_prime, check=True):
        self.coeffs = dict(coeffs)
        self.M = float(M)
        self.rho = float(rho)
        self.alpha_prime = float(alpha_prime)
        if check:
            self.check_decay()

    def envelope(self, k: LevelBlockIndex):
        val = 2.0 ** k.num_active * self.M
        for l, v in k.entries:
            val *= (self.rho * 2.0 ** (self.alpha_prime * l)) ** (-v)
        return val

    def check_decay(self):
        for k, fk in self.coeffs.items():
            bound = self.envelope(k)
            if abs(fk) > 10.0 * bound:
                raise ValueError(
                    f"coefficient {k} = {fk:.3e} exceeds 10x its decay "
                    f"bound {bound:.3e}; certificate inconsistent")

    def dump(self):
        lines = []
        for k in sorted(self.coeffs, key=lambda b: b.entries):
            lines.append(f"{k!r} | {self.coeffs[k]:.16e} | "
                         f"{self.envelope(k):.6e}")
        return "\n".join(lines)


def cheb_block_coefficients(f, scales, blocks, M, rho, alpha_prime,
                            tail_level=None):
    """Tensor Chebyshev-Gauss coefficients of f(sum_l c_l z_l) for the given
    level blocks; 2 k_l + 8 quadrature points per active level, levels up to
    `tail_level` (default: all scale levels) integrated even when inactive,
    levels beyond frozen at z = 0.  Returns a ChebCoefficientTable whose
    `truncation_germ` attribute logs the frozen-tail germ mass."""
    qlevels = sorted(scales)
    if tail_level is None:
        tail_level = max(qlevels, default=0)
    kept = [q for q in qlevels if q <= tail_level]
    coeffs = {}
    for k in blocks:
        if any(q not in scales for q in k.active_levels):
            raise ValueError(f"block {k} uses a level outside the field")
        levels = sorted(set(kept) | set(k.active_levels))
        npts = [2 * k.get(q) + 8 for q in levels]
        nodes = [np.cos((2 * np.arange(1, n + 1) - 1) * np.pi / (2 * n))
                 for n in npts]
        total = 0.0
        for pt in itertools.product(*(range(n) for n in npts)):
            germ = sum(scales[q] * nodes[i][pt[i]]
                       for i, q in enumerate(levels))
            w = f(germ)
            for i, q in enumerate(levels):
                kq = k.get(q)
                if kq:
                    w *= np.cos(kq * np.arccos(nodes[i][pt[i]]))
            total += w
        total *= 2.0 ** k.num_active / np.prod([float(n) for n in npts])
        coeffs[k] = total
    table = ChebCoefficientTable(coeffs, M, rho, alpha_prime)
    table.truncation_germ = sum(scales[q] for q in qlevels if q > tail_level)
    return table


def exp_certificate(field):
    """Analyticity constants (M, rho, alpha') for a = exp(theta0 + germ)
    with per-qlevel scales c_q: from I_k(c) <= (c/2)^k I_0(c),
    |f_k| <= 2^{#active} M prod (rho 2^{alpha' q})^{-k_q} with
    rho = 2 / max_q c_q 2^{alpha' q} and M = e^{theta0} prod I_0(c_q)."""
    ap = field.alpha / field.Q
    # colored levels with no function get scale 0 (their factors vanish)
    scales = {q: field.qlevel_scale(q) for q in range(field.max_qlevel + 1)}
    cbar = max(c * 2.0 ** (ap * q) for q, c in scales.items() if c > 0)
    rho = 2.0 / cbar
    if rho <= 1.0:
        raise ValueError(
            f"expansion amplitudes too large for the Chebyshev certificate "
            f"(scaled sup {cbar:.3g} >= 2)")
    M = math.exp(field.theta0)
    for c in scales.values():
        M *= bessel_i(0, c)
    return M, rho, ap, scales


# ---------------------------------------------------------------------------
# schemes


@dataclass
class ModeOutput:
    """Fluxes of one compressed application B_n(v (x) L_nu): per output mode
    nu' a vector-valued piecewise polynomial on `mesh`."""
    mesh: object
    fluxes: dict
    ops: int = 0

    def modes(self):
        return sorted(self.fluxes)


class AffineScheme:
    """B_n keeps theta_0 and every theta_mu of raw level < n."""

    kind = "affine"

    def __init__(self, field):
        self.field = field
        self.alpha = field.alpha
        self.compr_rate = field.alpha   # ||B - B_n|| <~ 2^{-alpha n}
        self.dim = field.dim
        self.max_n = field.max_level + 1
        self._remainders = {n: self._schur_remainder(n)
                            for n in range(self.max_n + 1)}
        ns = range(self.max_n + 1)
        self.C_compr = max(self._remainders[n] * 2.0 ** (self.alpha * n)
                           for n in ns)
        self.C_cost = max(self.cost(n) / 2.0 ** (self.dim * n) for n in ns)

    def truncation(self, n):
        """The retained expansion functions (raw level < n)."""
        return [th for lvl in sorted(self.field.levels) if lvl < n
                for th in self.field.levels[lvl]]

    def cost(self, n):
        return 1 + 2 * len(self.truncation(n))

    def _schur_remainder(self, n):
        """Cellwise Schur bound on ||B - B_n||: the dropped part of a is
        sum_{|mu| >= n} y_mu theta_mu, whose stochastic interactions carry
        two sqrt(beta) <= sqrt(1/3) factors per function."""
        fine = self.field.finest_raw_level()
        grid = 1 << fine
        ny = grid if self.dim == 2 else 1
        worst = 0.0
        for ix in range(grid):
            for iy in range(ny):
                box = (fine, ix, iy)
                for (cx, cy) in _box_corners(box, self.dim):
                    s = sum(abs(th.eval_on_box(box, cx, cy))
                            for lvl, ths in self.field.levels.items()
                            if lvl >= n for th in ths)
                    worst = max(worst, s)
        return 2.0 * math.sqrt(1.0 / 3.0) * worst

    def schur_remainder(self, n):
        return self._remainders.get(n, self._schur_remainder(n))

    def bound_error(self, n):
        """Computable bound on ||B - B_n||_{V -> V'}."""
        return self.schur_remainder(min(n, self.max_n))

    def out_modes(self, nu: ParamIndex, n):
        out = {nu}
        for th in self.truncation(n):
            lab = th.label
            out.add(nu.add(lab, +1))
            if nu.get(lab) >= 1:
                out.add(nu.add(lab, -1))
        return sorted(out)

    def coefficient(self, nu, nup, x, y=0.0, n=None):
        """[a]_{nu nu'}(x) of the (possibly truncated) affine coefficient."""
        if n is None:
            n = self.max_n
        diffs = _index_delta(nu, nup)
        if not diffs:
            return self.field.theta0
        if len(diffs) != 1:
            return 0.0
        lab, d = diffs[0]
        if abs(d) != 1 or lab.level >= n:
            return 0.0
        th = self.field.theta_by_label(lab)
        deg = min(nu.get(lab), nup.get(lab)) + 1
        return th(x, y) * math.sqrt(beta(deg))


def build_scheme_affine(field, param):
    if param.kind != "affine":
        raise ValueError("affine scheme requires an affine parametrization")
    return AffineScheme(field)


class NonlinearScheme:
    """Greedy level-block compression of a = exp(theta0) f(germ).

    For log-affine fields the block coefficients are exact products of
    modified Bessel values per colored level; analytic f uses tensor
    Chebyshev-Gauss quadrature with the supplied certificate.
    """

    kind = "nonlinear"

    def __init__(self, field, param, budget_scale=1.0, measure_n=4):
        self.field = field
        self.param = param
        self.dim = field.dim
        self.budget_scale = float(budget_scale)
        if param.kind == "logaffine":
            M, rho, ap, scales = exp_certificate(field)
            self.prefactor = math.exp(field.theta0)
            self._exp = True
        elif param.kind == "analytic":
            cert = param.certificate
            if not cert:
                raise ValueError("analytic parametrization needs a "
                                 "certificate (M, rho, alpha_prime)")
            M = cert["M"]
            rho = cert["rho"]
            ap = cert["alpha_prime"] / field.Q
            scales = {q: field.qlevel_scale(q)
                      for q in range(field.max_qlevel + 1)}
            self.prefactor = 1.0
            self._exp = False
        else:
            raise ValueError("nonlinear scheme requires a log-affine or "
                             "analytic parametrization")
        self.M, self.rho, self.alpha_prime = M, rho, ap
        self.compr_rate = ap * field.Q  # ||B - B_n|| <~ 2^{-rate n}
        self.scales = scales
        self.weights = InteractionWeights(
            alpha_prime=ap, rho=rho, dim_over_q=field.dim / field.Q)
        self._bessel = {}
        if self._exp:
            self._i0_all = self.prefactor * math.prod(
                bessel_i(0, c) for c in scales.values())
        self._fk = {ZERO_BLOCK: self._compute_f(ZERO_BLOCK)}
        self._blocks_cache = {}
        # measured constants over small n
        costs, errs = [], []
        for n in range(measure_n + 1):
            K = self.blocks(n)
            costs.append(sum(weight_b(k, self.weights) for k in K)
                         / 2.0 ** (self.dim * n))
            errs.append(self.envelope_tail(K) * 2.0 ** (ap * field.Q * n))
        self.C_cost = max(costs)
        self.C_compr = max(errs)

    # -- block selection -----------------------------------------------------

    def blocks(self, n):
        if n not in self._blocks_cache:
            # once the envelope tail is at machine level, larger budgets
            # only add blocks with vanishing coefficients
            for n0 in sorted(self._blocks_cache):
                if n0 < n and self.envelope_tail(self._blocks_cache[n0]) \
                        < 1e-15 * self.M * max(self.prefactor, 1.0):
                    self._blocks_cache[n] = self._blocks_cache[n0]
                    return self._blocks_cache[n]
            budget = max(1.0, self.budget_scale * 2.0 ** (self.dim * n))
            self._blocks_cache[n] = greedy_block_sequence(
                self.weights, budget, max_qlevel=self.field.max_qlevel)
        return self._blocks_cache[n]

    # -- coefficients ----------------------------------------------------------

    def _bessel_table(self, q, kmax):
        tab = self._bessel.get(q)
        if tab is None or len(tab) <= kmax:
            tab = cheb_exp_coefficients(self.scales[q], max(kmax, 8))
            self._bessel[q] = tab
        return tab

    def _compute_f(self, k: LevelBlockIndex):
        if self._exp:
            val = self._i0_all
            for q, v in k.entries:
                tab = self._bessel_table(q, v)
                val *= tab[v] / tab[0]
            return val
        table = cheb_block_coefficients(
            self.param.f, self.scales, [k], self.M, self.rho,
            self.alpha_prime)
        return table.coeffs[k]

    def f_coefficient(self, k: LevelBlockIndex):
        if k not in self._fk:
            self._fk[k] = self._compute_f(k)
        return self._fk[k]

    def table(self, n):
        """ChebCoefficientTable of the blocks retained at compression n."""
        return ChebCoefficientTable(
            {k: self.f_coefficient(k) for k in self.blocks(n)},
            self.M * max(self.prefactor, 1.0), self.rho, self.alpha_prime)

    def envelope_tail(self, kept):
        """Schur-summable bound on the omitted blocks:
        M sum_{k not kept} 4^{#active} prod (rho 2^{alpha' q})^{-k_q}."""
        xs = {q: (self.rho * 2.0 ** (self.alpha_prime * q)) ** -1.0
              for q in self.scales}
        total = math.prod(1.0 + 4.0 * x / (1.0 - x) for x in xs.values())
        for k in kept:
            term = 4.0 ** k.num_active
            for q, v in k.entries:
                term *= xs[q] ** v
            total -= term
        return self.M * max(self.prefactor, 1.0) * max(total, 0.0)

    def bound_error(self, n):
        """Computable bound on ||B - B_n||_{V -> V'}: the Schur-summable
        envelope of the omitted blocks."""
        return self.envelope_tail(self.blocks(n))

    def zhat(self, q, box, x, y=0.0):
        """(label, theta(x)/c_q) of the active function of qlevel q at x,
        or (None, 0.0) where the qlevel has no support."""
        th = self.field.active_theta(q, box)
        if th is None:
            return None, 0.0
        return th.label, th.eval_on_box(box, x, y) / self.scales[q]

    def coefficient(self, nu, nup, x, y=0.0, n=None, blocks=None):
        """[a]_{nu nu'}(x) summed over the retained blocks (all blocks of
        compression level n, default the full coefficient for log-affine
        fields via per-level factorization)."""
        box = point_box(x, y, self.field.finest_raw_level(), self.field.dim)
        if blocks is None and n is not None:
            blocks = self.blocks(n)
        if blocks is None:
            if self._exp:
                return self._coefficient_exact_exp(nu, nup, box, x, y)
            blocks = self.blocks(8)
        chain = {q: self.zhat(q, box, x, y) for q in self.scales}
        if not _delta_outside_chain(nu, nup, chain):
            return 0.0
        total = 0.0
        for k in blocks:
            term = self.f_coefficient(k)
            if term == 0.0:
                continue
            for q, (lab, z) in chain.items():
                kq = k.get(q)
                if lab is None:
                    term *= _cheb_at_zero(kq)
                else:
                    term *= triple_product(z, kq, nu.get(lab), nup.get(lab))
                if term == 0.0:
                    break
            total += term
        return total

    def _coefficient_exact_exp(self, nu, nup, box, x, y):
        """exp factorizes over colored levels: the full block sum is a
        product of per-level Bessel series."""
        total = self.prefactor
        for q in self.scales:
            lab, z = self.zhat(q, box, x, y)
            l = nu.get(lab) if lab is not None else 0
            lp = nup.get(lab) if lab is not None else 0
            if lab is None and l != lp:
                return 0.0
            kmax = abs(l - lp)
            s, prev = 0.0, math.inf
            tab = self._bessel_table(q, kmax + 8)
            while True:
                if kmax >= len(tab):
                    tab = self._bessel_table(q, 2 * kmax)
                if lab is None:
                    fac = _cheb_at_zero(kmax)
                else:
                    fac = triple_product(z, kmax, l, lp)
                s += tab[kmax] * fac
                if abs(tab[kmax]) < 1e-17 * max(1.0, abs(s)) and \
                        abs(prev) < 1e-17 * max(1.0, abs(s)):
                    break
                prev = tab[kmax]
                kmax += 1
            total *= s
            if total == 0.0:
                return 0.0
        if not _delta_outside_chain(nu, nup,
                                    {q: self.zhat(q, box, x, y)
                                     for q in self.scales}):
            return 0.0
        return total


def build_scheme_nonlinear(field, param, budget_scale=1.0):
    return NonlinearScheme(field, param, budget_scale=budget_scale)


def _cheb_at_zero(k):
    """T_k(0): 0 for odd k, (-1)^{k/2} for even k."""
    if k % 2 == 1:
        return 0.0
    return 1.0 if k % 4 == 0 else -1.0


def _index_delta(nu: ParamIndex, nup: ParamIndex):
    """Nonzero entrywise differences (label, nup - nu)."""
    labs = set(nu.support) | set(nup.support)
    return [(lab, nup.get(lab) - nu.get(lab)) for lab in sorted(labs)
            if nup.get(lab) != nu.get(lab)]


def _delta_outside_chain(nu, nup, chain):
    """Interactions vanish unless nu and nu' agree on every label that is
    not the active function of its colored level at the point."""
    active = {lab for lab, _ in chain.values() if lab is not None}
    for lab, _ in _index_delta(nu, nup):
        if lab not in active:
            return False
    return True


# ---------------------------------------------------------------------------
# single-mode application


def _mesh_level_for_boxes(dim, raw):
    """Uniform mesh level whose elements are contained in dyadic boxes of
    raw level `raw`."""
    return raw if dim == 2 else max(0, raw - 1)


def _box_corners(box, dim):
    from .fields import box_corners
    return box_corners(box, dim)


def _principal_lattice(coords, degree, dim):
    """Interpolation points: the principal lattice of the element."""
    if degree == 0:
        return [tuple(coords.mean(axis=0))]
    if dim == 1:
        a, b = coords[0, 0], coords[1, 0]
        return [(a + (b - a) * i / degree, 0.0) for i in range(degree + 1)]
    pts = []
    for i in range(degree + 1):
        for j in range(degree + 1 - i):
            lam = np.array([i, j, degree - i - j]) / degree
            p = lam @ coords
            pts.append((p[0], p[1]))
    return pts


def _monomials(degree, dim):
    if dim == 1:
        return [(i, 0) for i in range(degree + 1)]
    return [(i, j) for i in range(degree + 1)
            for j in range(degree + 1 - i)]


def _fit_poly(pts, vals, degree, dim):
    """Coefficient array (fem poly layout) interpolating vals at pts."""
    mono = _monomials(degree, dim)
    A = np.array([[x ** i * (y ** j if j else 1.0) for i, j in mono]
                  for x, y in pts])
    sol = np.linalg.solve(A, np.asarray(vals, float))
    if dim == 1:
        return sol
    out = np.zeros((degree + 1, degree + 1))
    for c, (i, j) in zip(sol, mono):
        out[i, j] = c
    return out


def apply_mode(scheme, n, v, nu: ParamIndex) -> ModeOutput:
    """Fluxes [g]_{nu'} = [a_n]_{nu nu'} grad v of the compressed operator
    applied to v (x) L_nu, exact piecewise polynomials on the overlay of
    v's mesh with the uniform mesh resolving the coefficient cells."""
    field = scheme.field
    dim = field.dim
    if scheme.kind == "affine":
        qlevels = [th.label.qlevel for th in scheme.truncation(n)]
    else:
        qlevels = sorted(field.by_qlevel)
    raw = field.finest_raw_level(qlevels) if qlevels else field.tau
    om = overlay(v.mesh, uniform_mesh(dim, _mesh_level_for_boxes(dim, raw)))
    vv = prolong(v, om)
    if scheme.kind == "affine":
        return _apply_affine(scheme, n, vv, nu, om)
    return _apply_nonlinear(scheme, n, vv, nu, om)


def _apply_affine(scheme, n, vv, nu, om):
    field = scheme.field
    dim = field.dim
    raw = field.finest_raw_level()
    fluxes = {}
    ops = 0

    def add(nup, eid, poly, grad):
        comps = fluxes.setdefault(nup, {})
        prev = comps.get(eid)
        contrib = tuple(_poly_scale_nd(poly, g, dim) for g in grad)
        if prev is None:
            comps[eid] = contrib
        else:
            comps[eid] = tuple(_poly_add_nd(a, b) for a, b in
                               zip(prev, contrib))

    theta0 = field.theta0
    for eid in om.leaves:
        grad = vv.gradient_on(eid)
        ops += 1
        if not np.any(grad):
            continue
        add(nu, eid, _const_nd(theta0, dim), grad)
        c = _coords(dim, eid)
        center = c.mean(axis=0)
        box = point_box(center[0], center[1] if dim == 2 else 0.0, raw, dim)
        for th in scheme.truncation(n):
            poly = _theta_poly_on_box(th, box, dim)
            if poly is None:
                continue
            lab = th.label
            up = math.sqrt(beta(nu.get(lab) + 1))
            add(nu.add(lab, +1), eid, _poly_scale_nd(poly, up, dim), grad)
            if nu.get(lab) >= 1:
                dn = math.sqrt(beta(nu.get(lab)))
                add(nu.add(lab, -1), eid, _poly_scale_nd(poly, dn, dim), grad)
    return ModeOutput(om, {nup: PiecewiseFlux(om, comps)
                           for nup, comps in fluxes.items()}, ops)


def _apply_nonlinear(scheme, n, vv, nu, om):
    field = scheme.field
    dim = field.dim
    raw = field.finest_raw_level()
    blocks = scheme.blocks(n)
    maxdeg = field.m * max((k.order for k in blocks), default=0)
    fluxes = {}
    ops = 0
    for eid in om.leaves:
        grad = vv.gradient_on(eid)
        if not np.any(grad):
            continue
        coords = _coords(dim, eid)
        center = coords.mean(axis=0)
        box = point_box(center[0], center[1] if dim == 2 else 0.0, raw, dim)
        chain = {q: field.active_theta(q, box) for q in scheme.scales}
        # output modes reachable on this cell
        cands = _cell_out_modes(nu, blocks, chain)
        if not cands:
            continue
        pts = _principal_lattice(coords, maxdeg, dim)
        vals, nops = _cell_block_values(scheme, nu, cands, blocks, chain,
                                        box, pts)
        ops += nops
        for nup in cands:
            if not any(vals[nup]):
                continue
            poly = _fit_poly(pts, vals[nup], maxdeg, dim)
            comps = fluxes.setdefault(nup, {})
            comps[eid] = tuple(_poly_scale_nd(poly, g, dim) for g in grad)
    return ModeOutput(om, {nup: PiecewiseFlux(om, comps)
                           for nup, comps in fluxes.items()}, ops)


def _cell_block_values(scheme, nu, cands, blocks, chain, box, pts):
    """Values of the block-truncated coefficients x -> [a_n]_{nu nu'}(x)
    at the interpolation points, for every candidate output mode."""
    vals = {nup: [] for nup in cands}
    ops = 0
    for (px, py) in pts:
        ops += 1
        zs = {q: (th.label, th.eval_on_box(box, px, py)
                  / scheme.scales[q]) if th is not None else (None, 0.0)
              for q, th in chain.items()}
        tabs = {}
        for nup in cands:
            total = 0.0
            for k in blocks:
                term = scheme.f_coefficient(k)
                if term == 0.0:
                    continue
                for q, (lab, z) in zs.items():
                    kq = k.get(q)
                    if lab is None:
                        if nu.get(lab) != nup.get(lab):
                            term = 0.0
                        else:
                            term *= _cheb_at_zero(kq)
                    else:
                        l, lp = nu.get(lab), nup.get(lab)
                        if abs(l - lp) > kq:
                            term = 0.0
                        else:
                            key = (q, l, lp)
                            tab = tabs.get(key)
                            if tab is None or len(tab) <= kq:
                                kmax = max(kq, max(
                                    b.get(q) for b in blocks))
                                tab = triple_product_table(z, kmax, l, lp)
                                tabs[key] = tab
                            term *= tab[kq]
                    if term == 0.0:
                        break
                total += term
            vals[nup].append(total)
    return vals, ops


def block_coefficient_polys(scheme, n, nu: ParamIndex, modes=None):
    """Exact piecewise-polynomial representation of the block-truncated
    interaction coefficients x -> [a_n]_{nu nu'}(x), one
    PiecewisePolyCoefficient per reachable output mode nu' (optionally
    restricted to `modes`), on the uniform mesh resolving the coefficient
    cells.  Used for assembling Galerkin matrices."""
    field = scheme.field
    dim = field.dim
    if scheme.kind == "affine":
        qlevels = [th.label.qlevel for th in scheme.truncation(n)]
    else:
        qlevels = sorted(field.by_qlevel)
    raw = field.finest_raw_level(qlevels) if qlevels else field.tau
    bm = uniform_mesh(dim, _mesh_level_for_boxes(dim, raw))
    raw_full = field.finest_raw_level()

    def want(nup):
        return modes is None or nup in modes

    out = {}
    if scheme.kind == "affine":
        if want(nu):
            out[nu] = {e: _const_nd(field.theta0, dim) for e in bm.leaves}
        for eid in bm.leaves:
            c = _coords(dim, eid)
            center = c.mean(axis=0)
            box = point_box(center[0], center[1] if dim == 2 else 0.0,
                            raw_full, dim)
            for th in scheme.truncation(n):
                poly = _theta_poly_on_box(th, box, dim)
                if poly is None:
                    continue
                lab = th.label
                for shift in (+1, -1):
                    if shift < 0 and nu.get(lab) < 1:
                        continue
                    nup = nu.add(lab, shift)
                    if not want(nup):
                        continue
                    s = math.sqrt(beta(nu.get(lab) + (1 if shift > 0 else 0)))
                    d = out.setdefault(nup, {})
                    contrib = _poly_scale_nd(poly, s, dim)
                    prev = d.get(eid)
                    d[eid] = contrib if prev is None else _poly_add_nd(
                        prev, contrib)
    else:
        blocks = scheme.blocks(n)
        maxdeg = field.m * max((k.order for k in blocks), default=0)
        for eid in bm.leaves:
            coords = _coords(dim, eid)
            center = coords.mean(axis=0)
            box = point_box(center[0], center[1] if dim == 2 else 0.0,
                            raw_full, dim)
            chain = {q: field.active_theta(q, box) for q in scheme.scales}
            cands = [nup for nup in _cell_out_modes(nu, blocks, chain)
                     if want(nup)]
            if not cands:
                continue
            pts = _principal_lattice(coords, maxdeg, dim)
            vals, _ = _cell_block_values(scheme, nu, cands, blocks, chain,
                                         box, pts)
            for nup in cands:
                if not any(vals[nup]):
                    continue
                out.setdefault(nup, {})[eid] = _fit_poly(
                    pts, vals[nup], maxdeg, dim)
    zero = _const_nd(0.0, dim)
    for polys in out.values():
        for e in bm.leaves:
            polys.setdefault(e, zero)
    return {nup: PiecewisePolyCoefficient(bm, polys)
            for nup, polys in sorted(out.items())}


def _cell_out_modes(nu, blocks, chain):
    """All nu' reachable from nu on a cell: per block, shift each active
    label by +-k_q; inactive levels admit only even k_q (T_k(0) terms)."""
    out = set()
    for k in blocks:
        cands = [nu]
        dead = False
        for q, v in k.entries:
            th = chain.get(q)
            if th is None:
                if v % 2 == 1:
                    dead = True
                    break
                continue
            lab = th.label
            nxt = []
            for c in cands:
                nxt.append(c.add(lab, +v))
                if c.get(lab) - v >= 0:
                    nxt.append(c.add(lab, -v))
                # intermediate parity-compatible changes j < v also occur
                j = v - 2
                while j > 0:
                    nxt.append(c.add(lab, +j))
                    if c.get(lab) - j >= 0:
                        nxt.append(c.add(lab, -j))
                    j -= 2
                if v % 2 == 0:
                    nxt.append(c)
            cands = nxt
        if not dead:
            out.update(cands)
    return sorted(out)


def interaction_support(scheme, nu, n):
    """Upper-bound enumeration of the output support (union of the exact
    per-cell mode sets over all cells)."""
    field = scheme.field
    raw = field.finest_raw_level()
    grid = 1 << raw
    ny = grid if field.dim == 2 else 1
    blocks = scheme.blocks(n) if scheme.kind != "affine" else None
    out = set()
    for ix in range(grid):
        for iy in range(ny):
            box = (raw, ix, iy)
            if scheme.kind == "affine":
                out.update(scheme.out_modes(nu, n))
            else:
                chain = {q: field.active_theta(q, box)
                         for q in scheme.scales}
                out.update(_cell_out_modes(nu, blocks, chain))
    return sorted(out)


# -- tiny nd-poly helpers (fem layout: 1D coeff vector / 2D coeff matrix) ----


def _const_nd(val, dim):
    return np.array([val]) if dim == 1 else np.array([[val]])


def _poly_scale_nd(p, s, dim=None):
    return np.asarray(p, float) * s


def _poly_add_nd(a, b):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if a.ndim == 1:
        n = max(len(a), len(b))
        out = np.zeros(n)
        out[:len(a)] += a
        out[:len(b)] += b
        return out
    n = max(a.shape[0], b.shape[0])
    m = max(a.shape[1], b.shape[1])
    out = np.zeros((n, m))
    out[:a.shape[0], :a.shape[1]] += a
    out[:b.shape[0], :b.shape[1]] += b
    return out


def _theta_poly_on_box(th, box, dim):
    """Global-monomial polynomial of theta on (an ancestor of) `box`,
    None when unsupported there."""
    from .fields import box_ancestor
    for b, poly in zip(th.boxes, th.polys):
        if b[0] <= box[0] and box_ancestor(box, b[0]) == b:
            return np.asarray(poly, float)
    return None
