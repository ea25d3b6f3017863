"""Independent brute-force oracles for the closed-form claims.

Everything here deliberately avoids the production code paths: interaction
coefficients come from dense tensor Gauss-Legendre quadrature of the
coefficient itself, dual norms from a dense Riesz solve with a locally
assembled stiffness matrix, tail inequalities from literal brute-force
summation, and the tree benchmark from exhaustive enumeration of
downward-closed sets.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import comb, eval_legendre

from .mesh import element_verts, vcoord

MAX_ACTIVE_VARS = 6


# ---------------------------------------------------------------------------
# interaction coefficients by dense quadrature


def _legendre_on(n, y):
    """Orthonormal Legendre value sqrt(2n+1) P_n(y) (unit uniform measure
    on [-1, 1])."""
    return math.sqrt(2 * n + 1) * eval_legendre(n, y)


def quad_interaction_oracle(field, param, nu, nup, points, ypos=0.0,
                            extra_degree=8):
    """[a]_{nu nu'}(x) = int a(x, y) L_nu(y) L_nu'(y) dsigma(y) at the
    given spatial points, by tensor Gauss-Legendre quadrature over every
    parameter the coefficient actually depends on at x.

    The per-variable quadrature is exact up to polynomial degree
    |nu|_1 + |nup|_1 + extra_degree.  Points are x floats in 1D or (x, y)
    pairs in 2D (ypos is ignored for pairs)."""
    deg = sum(v for _, v in nu.entries) + sum(v for _, v in nup.entries)
    npts = (deg + extra_degree) // 2 + 1
    nodes, weights = np.polynomial.legendre.leggauss(npts)
    weights = weights / 2.0   # uniform probability measure on [-1, 1]
    thetas = sorted(field.all_thetas(), key=lambda t: t.label)
    mode_labels = {lab for lab, _ in nu.entries} | \
        {lab for lab, _ in nup.entries}
    out = np.empty(len(points))
    for ip, pt in enumerate(points):
        if isinstance(pt, tuple):
            x, yy = pt
        else:
            x, yy = float(pt), ypos
        active = [t for t in thetas
                  if t(x, yy) != 0.0 or t.label in mode_labels]
        if len(active) > MAX_ACTIVE_VARS:
            raise ValueError(
                f"{len(active)} active parameters at x = {x} exceed the "
                f"oracle limit {MAX_ACTIVE_VARS}")
        grids = np.meshgrid(*([nodes] * len(active)), indexing="ij")
        wgrid = np.ones(grids[0].shape if grids else ())
        for g in np.meshgrid(*([weights] * len(active)), indexing="ij"):
            wgrid = wgrid * g
        germ = np.zeros_like(wgrid)
        leg = np.ones_like(wgrid)
        for t, g in zip(active, grids):
            germ = germ + t(x, yy) * g
            leg = leg * _legendre_on(nu.get(t.label), g)
            leg = leg * _legendre_on(nup.get(t.label), g)
        if param.kind == "affine":
            avals = field.theta0 + germ
        elif param.kind == "logaffine":
            avals = np.exp(field.theta0 + germ)
        else:
            avals = np.vectorize(param.f)(germ) if germ.ndim \
                else param.f(float(germ))
        out[ip] = float(np.sum(avals * leg * wgrid)) if len(active) \
            else float(avals)
    return out


def dense_interaction_pairing(field, param, u, w, nu, nup, degree=8):
    """<B (u x L_nu), w x L_nu'> by cellwise spatial quadrature of
    [a]_{nu nu'} grad u . grad w with the quadrature oracle above."""
    from .fem import interval_quadrature, triangle_quadrature, \
        element_coords
    from .mesh import overlay
    mesh = overlay(u.mesh, w.mesh)
    from .fem import prolong
    uu, ww = prolong(u, mesh), prolong(w, mesh)
    total = 0.0
    for eid in mesh.leaves:
        gu = uu.gradient_on(eid)
        gw = ww.gradient_on(eid)
        dot = float(np.dot(gu, gw))
        if dot == 0.0:
            continue
        coords = element_coords(mesh, eid)
        if mesh.dim == 1:
            pts, wts = interval_quadrature(coords[0][0], coords[1][0],
                                           degree)
            pv = [float(p) for p in pts]
        else:
            pts, wts = triangle_quadrature(coords, degree)
            pv = [tuple(p) for p in pts]
        vals = quad_interaction_oracle(field, param, nu, nup, pv)
        total += dot * float(np.dot(wts, vals))
    return total


# ---------------------------------------------------------------------------
# tail inequalities


def stechkin_check(a, b, p, k):
    """sum_{i>k} a_i b_i <= (sum_i a_i^p b_i)^{1/p} (sum_{i<=k} b_i)^{1-1/p}
    for nonincreasing a >= 0, b > 0, 0 < p < 1, k >= 1."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    if k < 1:
        raise ValueError("k must be >= 1")
    if not 0 < p < 1:
        raise ValueError("p must lie in (0, 1)")
    if np.any(a < 0) or np.any(np.diff(a) > 0):
        raise ValueError("a must be nonnegative and nonincreasing")
    if np.any(b <= 0):
        raise ValueError("b must be positive")
    lhs = float(np.sum(a[k:] * b[k:]))
    rhs = float(np.sum(a ** p * b)) ** (1.0 / p) \
        * float(np.sum(b[:k])) ** (1.0 - 1.0 / p)
    return lhs <= rhs * (1.0 + 1e-12)


def _multi_indices(levels, total):
    """All k in N_0^{levels+1} with |k|_1 <= total (finitely supported
    truncation of F(N_0))."""
    def rec(slot, rem):
        if slot == levels + 1:
            yield ()
            return
        for v in range(rem + 1):
            for tail in rec(slot + 1, rem - v):
                yield (v,) + tail
    return list(rec(0, total))


def summability_check(alpha, rho, p, d=1, t=None, da=None, db=None,
                      levels=8, kmax=8):
    """Brute-force partial sum of the weighted reference sequence against
    its closed-form bound.

    Plain variant (t is None):
        a_k = 2^{-d max supp} prod (rho 2^{alpha l})^{-k_l},
        b_k = 2^{#supp} 2^{d max supp},      requires 1/p - 1 < alpha/d.
    Binomial variant (t given, dimensions da/db):
        b_k additionally carries prod C(k_l + t, t) and the cost dimension
        db may differ from the decay dimension da; requires
        db/p - da < alpha.
    Returns (truncated lhs, closed-form rhs)."""
    rp = rho ** (-p)
    if t is None:
        da = db = d
        if not d * (1 - p) - alpha * p < 0:
            raise ValueError("need 1/p - 1 < alpha/d")
        expfac = rp * (2.0 - rp) / ((1.0 - rp) * (1.0 - 2.0 ** (-alpha * p)))
        rhs = 1.0 + rp * math.exp(expfac) \
            / (1.0 - 2.0 ** (d * (1 - p) - alpha * p))
    else:
        da = d if da is None else da
        db = d if db is None else db
        if not db / p - da < alpha:
            raise ValueError("need db/p - da < alpha")
        expfac = rp * (t + 1) * (2.0 - rp) \
            / ((1.0 - rp) * (1.0 - 2.0 ** (-alpha * p)))
        rhs = 1.0 + rp * math.exp(expfac) \
            / (1.0 - 2.0 ** (db - (alpha + da) * p))
    lhs = 0.0
    for k in _multi_indices(levels, kmax):
        supp = [l for l, v in enumerate(k) if v > 0]
        if not supp:
            lhs += 1.0   # a_0 = b_0 = 1 by the empty-product convention
            continue
        lmax = max(supp)
        ak = 2.0 ** (-da * lmax) * math.prod(
            (rho * 2.0 ** (alpha * l)) ** (-k[l]) for l in supp)
        bk = 2.0 ** len(supp) * 2.0 ** (db * lmax)
        if t is not None:
            bk *= math.prod(comb(k[l] + t, t, exact=True) for l in supp)
        lhs += ak ** p * bk
    return lhs, rhs


# ---------------------------------------------------------------------------
# dense dual norm


def _local_stiffness(mesh):
    """Unit-coefficient P1 stiffness assembled directly from element
    geometry (barycentric gradients), independent of the fem module's
    quadrature-based assembly."""
    iv = {v: i for i, v in enumerate(mesh.interior_vertices)}
    n = len(iv)
    A = np.zeros((n, n))
    for eid in mesh.leaves:
        verts = element_verts(mesh.dim, eid)
        X = np.array([vcoord(v)[:mesh.dim] if mesh.dim == 2
                      else [vcoord(v)[0]] for v in verts])
        if mesh.dim == 1:
            h = abs(X[1, 0] - X[0, 0])
            grads = np.array([[-1.0], [1.0]]) / (X[1, 0] - X[0, 0])
            vol = h
        else:
            M = np.column_stack([X[1] - X[0], X[2] - X[0]])
            vol = 0.5 * abs(np.linalg.det(M))
            # rows of inv(M) are the barycentric gradients of the two
            # non-anchor hats; the anchor's is minus their sum
            G = np.linalg.inv(M)
            grads = np.vstack([-G.sum(axis=0), G])
        for ia, va in enumerate(verts):
            if va not in iv:
                continue
            for ib, vb in enumerate(verts):
                if vb not in iv:
                    continue
                A[iv[va], iv[vb]] += vol * float(
                    np.dot(grads[ia], grads[ib]))
    return A


def dense_dual_norm(pairing, mesh):
    """||xi||_{V'} restricted to the P1 space on `mesh`: dense Riesz solve
    of the unit Laplacian against the hat values pairing(v) for each
    interior vertex v."""
    A = _local_stiffness(mesh)
    b = np.array([pairing(v) for v in mesh.interior_vertices])
    z = np.linalg.solve(A, b)
    return math.sqrt(max(float(b @ z), 0.0))


def functional_pairing(xi, mesh):
    """Adapts a ResidualFunctional (or anything with the dual_pair
    protocol) to a per-hat callable on `mesh`."""
    from .fem import P1Function, dual_pair
    iv = {v: i for i, v in enumerate(mesh.interior_vertices)}
    n = len(iv)

    def pair(v):
        e = np.zeros(n)
        e[iv[v]] = 1.0
        return dual_pair(xi, P1Function(mesh, e))
    return pair


# ---------------------------------------------------------------------------
# rate fits


def rate_fit(xs, ys, tail=0.6):
    """Least-squares slope of log2(y) against log2(x) over the last `tail`
    fraction of the points.  Returns (slope, halfwidth) where halfwidth is
    a 2-sigma confidence radius from the fit covariance."""
    xs = np.asarray(xs, float)
    ys = np.asarray(ys, float)
    keep = (xs > 0) & (ys > 0)
    xs, ys = xs[keep], ys[keep]
    if len(xs) < 3:
        raise ValueError("need at least 3 positive points for a rate fit")
    start = int(math.floor(len(xs) * (1.0 - tail)))
    start = min(start, len(xs) - 3)
    lx, ly = np.log2(xs[start:]), np.log2(ys[start:])
    if np.ptp(lx) == 0:
        raise ValueError("degenerate abscissae in rate fit")
    (slope, _), cov = np.polyfit(lx, ly, 1, cov=True)
    return float(slope), 2.0 * math.sqrt(max(float(cov[0, 0]), 0.0))


# ---------------------------------------------------------------------------
# exhaustive tree benchmark


def brute_force_tree_oracle(parents, values, omega):
    """Minimal cardinality of a downward-closed (w.r.t. `parents`) node set
    capturing at least omega^2 of the squared indicator mass; exhaustive
    over all subsets (instances capped at 20 nodes)."""
    nodes = sorted(values)
    if len(nodes) > 20:
        raise ValueError("brute-force oracle capped at 20 nodes")
    idx = {nd: i for i, nd in enumerate(nodes)}
    par = [idx[parents[nd]] if parents.get(nd) is not None else -1
           for nd in nodes]
    vv = np.array([values[nd] ** 2 for nd in nodes])
    target = omega ** 2 * float(vv.sum())
    best = None
    for mask in range(1 << len(nodes)):
        if best is not None and bin(mask).count("1") >= best:
            continue
        ok = True
        cap = 0.0
        for i in range(len(nodes)):
            if mask >> i & 1:
                if par[i] >= 0 and not mask >> par[i] & 1:
                    ok = False
                    break
                cap += vv[i]
        if ok and cap >= target * (1 - 1e-12):
            best = bin(mask).count("1")
    return best
