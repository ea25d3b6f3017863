"""P1 finite elements on bisection meshes with exact polynomial quadrature.

Coefficients, fluxes and residual data are piecewise polynomials stored in
global monomials (1D arrays c[i] -> sum c_i x^i for d=1, 2D arrays
c[i,j] -> sum c_ij x^i y^j for d=2).  All integrals are evaluated with
Gauss rules exact to the required degree, so assembly introduces no
quadrature error for polynomial data.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from numpy.polynomial.legendre import leggauss
from numpy.polynomial.polynomial import polyval, polyval2d

from .mesh import BisectionMesh, overlay, vcoord

# ---------------------------------------------------------------------------
# polynomials


def poly_eval(c, x, y=None):
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        return polyval(x, c)
    return polyval2d(x, y, c)


def poly_degree(c):
    c = np.asarray(c)
    if c.ndim == 1:
        nz = np.nonzero(np.abs(c) > 0)[0]
        return int(nz[-1]) if len(nz) else 0
    deg = 0
    for i in range(c.shape[0]):
        for j in range(c.shape[1]):
            if c[i, j] != 0:
                deg = max(deg, i + j)
    return deg


def poly_dx(c):
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        return np.polynomial.polynomial.polyder(c) if len(c) > 1 else np.zeros(1)
    if c.shape[0] == 1:
        return np.zeros((1, c.shape[1]))
    return c[1:, :] * np.arange(1, c.shape[0])[:, None]


def poly_dy(c):
    c = np.asarray(c, dtype=float)
    if c.ndim == 1:
        raise ValueError("poly_dy on a 1D polynomial")
    if c.shape[1] == 1:
        return np.zeros((c.shape[0], 1))
    return c[:, 1:] * np.arange(1, c.shape[1])[None, :]


def const_poly(value, dim):
    return np.array([value]) if dim == 1 else np.array([[value]])


def poly_add(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.ndim == 1:
        n = max(len(a), len(b))
        out = np.zeros(n)
        out[:len(a)] += a
        out[:len(b)] += b
        return out
    n0 = max(a.shape[0], b.shape[0])
    n1 = max(a.shape[1], b.shape[1])
    out = np.zeros((n0, n1))
    out[:a.shape[0], :a.shape[1]] += a
    out[:b.shape[0], :b.shape[1]] += b
    return out


def poly_scale(a, s):
    return np.asarray(a, float) * s


# ---------------------------------------------------------------------------
# quadrature


_GAUSS_1D = {}


def gauss_1d(n):
    if n not in _GAUSS_1D:
        _GAUSS_1D[n] = leggauss(n)
    return _GAUSS_1D[n]


def interval_quadrature(a, b, degree):
    """Points/weights exact for 1D polynomials up to `degree` on [a, b]."""
    n = max(1, (degree + 2) // 2)
    x, w = gauss_1d(n)
    mid, half = 0.5 * (a + b), 0.5 * (b - a)
    return mid + half * x, half * w


def triangle_quadrature(coords, degree):
    """Points/weights exact for 2D polynomials up to `degree` on the
    triangle with rows of `coords` as vertices (Duffy tensor rule)."""
    n = degree + 1
    x, w = gauss_1d(n)
    u = 0.5 * (x + 1.0)
    wu = 0.5 * w
    U, V = np.meshgrid(u, u, indexing="ij")
    WU, WV = np.meshgrid(wu, wu, indexing="ij")
    lam1 = U * (1.0 - V)
    lam2 = U * V
    lam0 = 1.0 - lam1 - lam2
    weights = (WU * WV * U).ravel()  # Jacobian of the Duffy map is u
    p0, p1, p2 = (np.asarray(c, float) for c in coords)
    area2 = abs((p1 - p0)[0] * (p2 - p0)[1] - (p1 - p0)[1] * (p2 - p0)[0])
    pts = (lam0.ravel()[:, None] * p0 + lam1.ravel()[:, None] * p1
           + lam2.ravel()[:, None] * p2)
    return pts, weights * area2


def element_coords(mesh, eid):
    return np.array([vcoord(v) for v in mesh.verts(eid)])


def element_volume(mesh, eid):
    c = element_coords(mesh, eid)
    if mesh.dim == 1:
        return abs(c[1, 0] - c[0, 0])
    return 0.5 * abs((c[1] - c[0])[0] * (c[2] - c[0])[1]
                     - (c[1] - c[0])[1] * (c[2] - c[0])[0])


def integrate_poly(mesh, eid, poly):
    """Exact integral of a global-monomial polynomial over an element."""
    deg = poly_degree(poly)
    c = element_coords(mesh, eid)
    if mesh.dim == 1:
        x, w = interval_quadrature(c[0, 0], c[1, 0], deg)
        return float(np.dot(w, poly_eval(poly, x)))
    pts, w = triangle_quadrature(c, deg)
    return float(np.dot(w, poly_eval(poly, pts[:, 0], pts[:, 1])))


# ---------------------------------------------------------------------------
# P1 functions


class P1Function:
    """Continuous piecewise-linear function, zero on the boundary."""

    def __init__(self, mesh: BisectionMesh, nodal=None):
        self.mesh = mesh
        n = len(mesh.interior_vertices)
        self.nodal = np.zeros(n) if nodal is None else np.asarray(nodal, float)
        if len(self.nodal) != n:
            raise ValueError("nodal vector length mismatch")
        self._index = {v: i for i, v in enumerate(mesh.interior_vertices)}

    def value_at_vertex(self, v):
        i = self._index.get(v)
        return 0.0 if i is None else float(self.nodal[i])

    def element_values(self, eid):
        return np.array([self.value_at_vertex(v)
                         for v in self.mesh.verts(eid)])

    def gradient_on(self, eid):
        vals = self.element_values(eid)
        return p1_gradient(self.mesh, eid, vals)

    def as_poly_on(self, eid):
        """The affine polynomial equal to this function on element `eid`."""
        vals = self.element_values(eid)
        return p1_affine_poly(self.mesh, eid, vals)


def p1_gradient(mesh, eid, vals):
    c = element_coords(mesh, eid)
    if mesh.dim == 1:
        return np.array([(vals[1] - vals[0]) / (c[1, 0] - c[0, 0])])
    mat = np.column_stack([c[1] - c[0], c[2] - c[0]]).T
    rhs = np.array([vals[1] - vals[0], vals[2] - vals[0]])
    return np.linalg.solve(mat, rhs)


def p1_affine_poly(mesh, eid, vals):
    g = p1_gradient(mesh, eid, vals)
    c = element_coords(mesh, eid)
    if mesh.dim == 1:
        return np.array([vals[0] - g[0] * c[0, 0], g[0]])
    const = vals[0] - g[0] * c[0, 0] - g[1] * c[0, 1]
    out = np.zeros((2, 2))
    out[0, 0] = const
    out[1, 0] = g[0]
    out[0, 1] = g[1]
    return out


def hat_gradients(mesh, eid):
    """Gradients of the d+1 barycentric hat functions on an element."""
    c = element_coords(mesh, eid)
    if mesh.dim == 1:
        h = c[1, 0] - c[0, 0]
        return np.array([[-1.0 / h], [1.0 / h]])
    mat = np.column_stack([c[1] - c[0], c[2] - c[0]]).T
    inv = np.linalg.inv(mat)  # columns of inv are the barycentric gradients
    g1, g2 = inv[:, 0], inv[:, 1]
    return np.array([-g1 - g2, g1, g2])


def locate(mesh, point, eps=1e-12):
    """Leaf element containing the point (any one if on a facet)."""
    x, y = point
    from .mesh import _ROOTS, element_verts
    stack = [(r, ()) for r in range(len(_ROOTS[mesh.dim]))]
    while stack:
        eid = stack.pop()
        verts = element_verts(mesh.dim, eid)
        c = np.array([vcoord(v) for v in verts])
        if mesh.dim == 1:
            inside = c[0, 0] - eps <= x <= c[1, 0] + eps
        else:
            mat = np.column_stack([c[1] - c[0], c[2] - c[0]])
            lam = np.linalg.solve(mat, np.array([x - c[0, 0], y - c[0, 1]]))
            inside = lam[0] >= -eps and lam[1] >= -eps and lam.sum() <= 1 + eps
        if not inside:
            continue
        if eid in mesh.leaves:
            return eid
        root, bits = eid
        stack.extend([(root, bits + (0,)), (root, bits + (1,))])
    raise ValueError(f"point {point} not located")


def evaluate_p1(v: P1Function, point):
    eid = locate(v.mesh, point)
    poly = v.as_poly_on(eid)
    return float(poly_eval(poly, point[0], point[1]) if v.mesh.dim == 2
                 else poly_eval(poly, point[0]))


def prolong(v: P1Function, fine_mesh: BisectionMesh) -> P1Function:
    """Re-express v on a refinement of its mesh (exact for refinements)."""
    nodal = np.array([evaluate_p1(v, vcoord(vx))
                      for vx in fine_mesh.interior_vertices])
    return P1Function(fine_mesh, nodal)


# ---------------------------------------------------------------------------
# piecewise polynomial data


class PiecewisePolyCoefficient:
    """Scalar piecewise polynomial attached to the leaves of a mesh."""

    def __init__(self, mesh, polys, degree=None):
        self.mesh = mesh
        self.polys = dict(polys)
        self.degree = degree if degree is not None else max(
            (poly_degree(p) for p in self.polys.values()), default=0)

    @classmethod
    def constant(cls, mesh, value):
        p = const_poly(value, mesh.dim)
        return cls(mesh, {eid: p for eid in mesh.leaves}, degree=0)

    def poly_on(self, eid):
        """Polynomial on a leaf or descendant-of-leaf element id."""
        root, bits = eid
        for i in range(len(bits), -1, -1):
            cand = (root, bits[:i])
            if cand in self.polys:
                return self.polys[cand]
        raise KeyError(eid)


class PiecewiseFlux:
    """Vector-valued piecewise polynomial (a flux) on a mesh."""

    def __init__(self, mesh, comps, degree=None):
        self.mesh = mesh
        self.comps = dict(comps)   # eid -> tuple of dim polynomials
        self.degree = degree if degree is not None else max(
            (max(poly_degree(p) for p in c) for c in self.comps.values()),
            default=0)

    def on(self, eid):
        root, bits = eid
        for i in range(len(bits), -1, -1):
            cand = (root, bits[:i])
            if cand in self.comps:
                return self.comps[cand]
        return tuple(const_poly(0.0, self.mesh.dim)
                     for _ in range(self.mesh.dim))


# ---------------------------------------------------------------------------
# assembly


def _interior_index(mesh):
    return {v: i for i, v in enumerate(mesh.interior_vertices)}


def assemble_stiffness(coeff: PiecewisePolyCoefficient,
                       trial_mesh: BisectionMesh,
                       test_mesh: BisectionMesh = None):
    """Sparse matrix A[i, j] = int coeff grad(phi_j^trial).grad(phi_i^test),
    assembled exactly on the overlay mesh."""
    if test_mesh is None:
        test_mesh = trial_mesh
    om = overlay(overlay(trial_mesh, test_mesh), coeff.mesh)
    ti = _interior_index(trial_mesh)
    si = _interior_index(test_mesh)
    rows, cols, vals = [], [], []
    for eid in om.leaves:
        ctheta = integrate_poly(om, eid, coeff.poly_on(eid))
        if ctheta == 0.0:
            continue
        te = trial_mesh.leaf_ancestor_of(eid)
        se = test_mesh.leaf_ancestor_of(eid)
        tg = hat_gradients(trial_mesh, te)
        sg = hat_gradients(test_mesh, se)
        tverts = trial_mesh.verts(te)
        sverts = test_mesh.verts(se)
        for a, va in enumerate(sverts):
            ia = si.get(va)
            if ia is None:
                continue
            for b, vb in enumerate(tverts):
                ib = ti.get(vb)
                if ib is None:
                    continue
                rows.append(ia)
                cols.append(ib)
                vals.append(ctheta * float(sg[a] @ tg[b]))
    n, m = len(test_mesh.interior_vertices), len(trial_mesh.interior_vertices)
    return sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(n, m)))


def assemble_load(f: PiecewisePolyCoefficient, mesh: BisectionMesh):
    """Vector b[i] = int f phi_i, exact."""
    om = overlay(f.mesh, mesh)
    idx = _interior_index(mesh)
    out = np.zeros(len(mesh.interior_vertices))
    for eid in om.leaves:
        fp = f.poly_on(eid)
        deg = poly_degree(fp) + 1
        me = mesh.leaf_ancestor_of(eid)
        verts = mesh.verts(me)
        c = element_coords(om, eid)
        if mesh.dim == 1:
            x, w = interval_quadrature(c[0, 0], c[1, 0], deg)
            fv = poly_eval(fp, x)
            pts = np.column_stack([x, np.zeros_like(x)])
        else:
            pts, w = triangle_quadrature(c, deg)
            fv = poly_eval(fp, pts[:, 0], pts[:, 1])
        for a, va in enumerate(verts):
            ia = idx.get(va)
            if ia is None:
                continue
            hat = np.zeros(len(verts))
            hat[a] = 1.0
            hp = p1_affine_poly(mesh, me, hat)
            hv = (poly_eval(hp, pts[:, 0], pts[:, 1]) if mesh.dim == 2
                  else poly_eval(hp, pts[:, 0]))
            out[ia] += float(np.dot(w, fv * hv))
    return out


def assemble_mass(mesh: BisectionMesh):
    """Sparse mass matrix over the interior hat functions, exact."""
    idx = _interior_index(mesh)
    rows, cols, vals = [], [], []
    for eid in mesh.leaves:
        verts = mesh.verts(eid)
        vol = element_volume(mesh, eid)
        n = len(verts)
        # exact P1 mass on a simplex: vol/((d+1)(d+2)) * (1 + delta_ab)
        base = vol / ((n) * (n + 1))
        for a, va in enumerate(verts):
            ia = idx.get(va)
            if ia is None:
                continue
            for b, vb in enumerate(verts):
                ib = idx.get(vb)
                if ib is None:
                    continue
                rows.append(ia)
                cols.append(ib)
                vals.append(base * (2.0 if a == b else 1.0))
    n = len(mesh.interior_vertices)
    return sp.csr_matrix(sp.coo_matrix((vals, (rows, cols)), shape=(n, n)))


def p1_as_coefficient(v: P1Function) -> PiecewisePolyCoefficient:
    """Express a P1 function as piecewise affine polynomial data."""
    return PiecewisePolyCoefficient(
        v.mesh, {e: v.as_poly_on(e) for e in v.mesh.leaves}, degree=1)


# ---------------------------------------------------------------------------
# norms


def h1_seminorm(u: P1Function):
    s = 0.0
    for eid in u.mesh.leaves:
        g = u.gradient_on(eid)
        s += float(g @ g) * element_volume(u.mesh, eid)
    return np.sqrt(s)


def l2_norm(u: P1Function):
    s = 0.0
    for eid in u.mesh.leaves:
        poly = u.as_poly_on(eid)
        c = element_coords(u.mesh, eid)
        if u.mesh.dim == 1:
            x, w = interval_quadrature(c[0, 0], c[1, 0], 2)
            s += float(np.dot(w, poly_eval(poly, x) ** 2))
        else:
            pts, w = triangle_quadrature(c, 2)
            s += float(np.dot(w, poly_eval(poly, pts[:, 0], pts[:, 1]) ** 2))
    return np.sqrt(s)


def energy_product(coeff, u: P1Function, v: P1Function):
    A = assemble_stiffness(coeff, u.mesh, v.mesh)
    return float(v.nodal @ (A @ u.nodal))


# ---------------------------------------------------------------------------
# residual functionals


class ResidualFunctional:
    """<xi, w> = sum_K int xi_K w + sum_E int xi_E w.

    For d=1 the facet data are scalar point masses at interior vertices;
    for d=2 each interior edge E carries a 1D polynomial in the arclength
    parameter t in [0,1] along the canonically ordered edge."""

    def __init__(self, mesh, elem, facets, m1=0, m2=0):
        self.mesh = mesh
        self.elem = dict(elem)       # eid -> scalar polynomial
        self.facets = dict(facets)   # facet -> scalar (d=1) or 1D poly (d=2)
        self.m1 = m1
        self.m2 = m2

    def scaled(self, s):
        if s == 1.0:
            return self
        elem = {e: poly_scale(p, s) for e, p in self.elem.items()}
        if self.mesh.dim == 1:
            fac = {f: s * v for f, v in self.facets.items()}
        else:
            fac = {f: poly_scale(p, s) for f, p in self.facets.items()}
        return ResidualFunctional(self.mesh, elem, fac, self.m1, self.m2)


def edge_param(E):
    """Canonical parametrization of an edge: returns (p, q) with p < q in
    key order; t in [0,1] maps to p + t (q - p)."""
    a, b = sorted(E)
    return np.array(vcoord(a)), np.array(vcoord(b))


def residual_from_flux(f: PiecewisePolyCoefficient | None,
                       flux: PiecewiseFlux | None,
                       mesh: BisectionMesh) -> ResidualFunctional:
    """Strong form of <r, w> = <f, w> - int flux . grad w on `mesh`
    (which must refine the data meshes): element parts f + div(flux),
    facet parts -[[flux . n]]."""
    dim = mesh.dim
    elem = {}
    m1 = 0
    for eid in mesh.leaves:
        p = const_poly(0.0, dim)
        if f is not None:
            p = poly_add(p, f.poly_on(eid))
        if flux is not None:
            comps = flux.on(eid)
            p = poly_add(p, poly_dx(comps[0]))
            if dim == 2:
                p = poly_add(p, poly_dy(comps[1]))
        elem[eid] = p
        m1 = max(m1, poly_degree(p))
    facets = {}
    m2 = 0
    if flux is not None:
        em = mesh.edge_map()
        for E, els in em.items():
            if len(els) != 2:
                continue
            if dim == 1:
                (v,) = tuple(E)
                x = vcoord(v)[0]
                jump = 0.0
                for eid in els:
                    comps = flux.on(eid)
                    c = element_coords(mesh, eid)
                    nrm = 1.0 if x >= c[:, 0].max() - 1e-14 else -1.0
                    jump += nrm * poly_eval(comps[0], x)
                facets[E] = -jump
            else:
                p0, p1 = edge_param(E)
                tangent = p1 - p0
                poly_t = np.zeros(1)
                for eid in els:
                    comps = flux.on(eid)
                    c = element_coords(mesh, eid)
                    nrm = _outward_normal(c, p0, p1)
                    # flux . n restricted to the edge as a poly in t
                    for comp, ncomp in zip(comps, nrm):
                        if ncomp == 0.0:
                            continue
                        poly_t = poly_add(
                            poly_t, ncomp * _restrict_to_edge(comp, p0, tangent))
                facets[E] = poly_scale(poly_t, -1.0)
                m2 = max(m2, poly_degree(facets[E]))
    return ResidualFunctional(mesh, elem, facets, m1, m2)


def _outward_normal(coords, p0, p1):
    tangent = p1 - p0
    n = np.array([tangent[1], -tangent[0]])
    n = n / np.linalg.norm(n)
    inner = coords.sum(axis=0) / 3.0
    if n @ (inner - p0) > 0:
        n = -n
    return n


def _restrict_to_edge(poly2d, p0, tangent):
    """2D polynomial restricted to the parametrized edge as a 1D poly."""
    c = np.asarray(poly2d, float)
    px = np.array([p0[0], tangent[0]])  # x(t)
    py = np.array([p0[1], tangent[1]])  # y(t)
    out = np.zeros(1)
    xpow = np.ones(1)
    for i in range(c.shape[0]):
        ypow = np.ones(1)
        for j in range(c.shape[1]):
            if c[i, j] != 0.0:
                out = poly_add(out, c[i, j] * np.polynomial.polynomial.polymul(
                    xpow, ypow))
            ypow = np.polynomial.polynomial.polymul(ypow, py)
        xpow = np.polynomial.polynomial.polymul(xpow, px)
    return out


def strong_residual(coeff: PiecewisePolyCoefficient, u: P1Function,
                    f: PiecewisePolyCoefficient | None) -> ResidualFunctional:
    """Residual representation of f + div(coeff grad u) with facet jumps."""
    mesh = overlay(overlay(coeff.mesh, u.mesh),
                   f.mesh if f is not None else u.mesh)
    comps = {}
    for eid in mesh.leaves:
        ue = u.mesh.leaf_ancestor_of(eid)
        g = u.gradient_on(ue)
        cp = coeff.poly_on(eid)
        comps[eid] = tuple(poly_scale(cp, gc) for gc in g)
    flux = PiecewiseFlux(mesh, comps)
    return residual_from_flux(f, flux, mesh)


def dual_pair(xi: ResidualFunctional, v: P1Function):
    """<xi, v> evaluated exactly (overlay integration)."""
    om = overlay(xi.mesh, v.mesh)
    total = 0.0
    for eid in om.leaves:
        p = _elem_poly(xi, eid)
        if p is None:
            continue
        ve = v.mesh.leaf_ancestor_of(eid)
        vp = v.as_poly_on(ve)
        if om.dim == 1:
            c = element_coords(om, eid)
            x, w = interval_quadrature(c[0, 0], c[1, 0],
                                       poly_degree(p) + 1)
            total += float(np.dot(w, poly_eval(p, x) * poly_eval(vp, x)))
        else:
            c = element_coords(om, eid)
            pts, w = triangle_quadrature(c, poly_degree(p) + 1)
            total += float(np.dot(w, poly_eval(p, pts[:, 0], pts[:, 1])
                                  * poly_eval(vp, pts[:, 0], pts[:, 1])))
    if xi.mesh.dim == 1:
        for E, jump in xi.facets.items():
            (vx,) = tuple(E)
            total += jump * v.value_at_vertex(vx) if vx in v._index else \
                jump * evaluate_p1(v, vcoord(vx))
    else:
        om_edges = om.edge_map()
        for E, poly_t in xi.facets.items():
            p0, p1 = edge_param(E)
            length = np.linalg.norm(p1 - p0)
            for se, sub in _sub_edges(E, om_edges):
                # sub-edge parameter range [t0, t1] within E
                t0, t1 = se
                x, w = gauss_1d(max(1, (poly_degree(poly_t) + 3) // 2))
                tm, th = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
                tt = tm + th * x
                pts = p0[None, :] + tt[:, None] * (p1 - p0)[None, :]
                vv = np.array([evaluate_p1(v, (px, py)) for px, py in pts])
                total += float(np.dot(w * th * length,
                                      poly_eval(poly_t, tt) * vv))
    return total


def _elem_poly(xi, eid):
    root, bits = eid
    for i in range(len(bits), -1, -1):
        cand = (root, bits[:i])
        if cand in xi.elem:
            return xi.elem[cand]
    return None


def _cross2(u, v):
    return u[0] * v[1] - u[1] * v[0]


def _sub_edges(E, om_edges):
    """Overlay edges lying on the segment E, as parameter intervals."""
    p0, p1 = edge_param(E)
    d = p1 - p0
    dd = float(d @ d)
    out = []
    for F in om_edges:
        a, b = (np.array(vcoord(v)) for v in sorted(F))
        ta = ((a - p0) @ d) / dd
        tb = ((b - p0) @ d) / dd
        if not (-1e-12 <= ta <= 1 + 1e-12 and -1e-12 <= tb <= 1 + 1e-12):
            continue
        # collinearity
        if abs(_cross2(a - p0, d)) > 1e-12 or abs(_cross2(b - p0, d)) > 1e-12:
            continue
        out.append(((min(ta, tb), max(ta, tb)), F))
    return out
