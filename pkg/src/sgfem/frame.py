"""Multilevel hat-function frame over the uniform mesh hierarchy.

The frame consists of all interior hat functions psi_{j,k} of the uniform
meshes T_hat_j, normalized to |psi|_{H1} = 1.  A hat is *conforming* for a
mesh T when it is reproduced by nodal interpolation on T; the conforming
index sets S(T) span exactly V(T).  Residual functionals are paired with
all frame members up to a level offset J above the local mesh level; the
omitted tail is controlled by a calibrated constant times 2^{-J}.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    P1Function, assemble_load, assemble_mass, assemble_stiffness,
    element_coords, gauss_1d, hat_gradients, element_volume, integrate_poly,
    interval_quadrature, p1_affine_poly, p1_as_coefficient, poly_degree,
    poly_eval, triangle_quadrature, PiecewisePolyCoefficient,
    ResidualFunctional, edge_param,
)
from .mesh import (
    BisectionMesh, coarsen, element_verts, generation, initial_mesh,
    level_of_element, level_of_facet, on_boundary, uniform_mesh, vcoord,
)


class FrameIndex(NamedTuple):
    j: int
    node: tuple  # dyadic vertex key

    def __repr__(self):
        return f"lam({self.j},{self.node})"


# ---------------------------------------------------------------------------
# per-level tables (cached)

_NODE_NORMS = {}
_NODE_SUPPORT = {}
_LEVEL_EDGES = {}
_PROLONG = {}


def node_vnorms(dim, j):
    """||phi_{j,k}||_{H1} for every interior node k of T_hat_j."""
    key = (dim, j)
    if key not in _NODE_NORMS:
        m = uniform_mesh(dim, j)
        acc = {}
        for eid in m.leaves:
            g = hat_gradients(m, eid)
            vol = element_volume(m, eid)
            for a, v in enumerate(m.verts(eid)):
                if not on_boundary(v, dim):
                    acc[v] = acc.get(v, 0.0) + float(g[a] @ g[a]) * vol
        _NODE_NORMS[key] = {v: np.sqrt(s) for v, s in acc.items()}
    return _NODE_NORMS[key]


def node_support(dim, j):
    """Interior node -> tuple of T_hat_j elements containing it."""
    key = (dim, j)
    if key not in _NODE_SUPPORT:
        m = uniform_mesh(dim, j)
        acc = {}
        for eid in m.leaves:
            for v in m.verts(eid):
                if not on_boundary(v, dim):
                    acc.setdefault(v, []).append(eid)
        _NODE_SUPPORT[key] = {v: tuple(es) for v, es in acc.items()}
    return _NODE_SUPPORT[key]


def _midpoint_edges(dim, j):
    """Midpoint vertex -> endpoints of the level-j refinement edge."""
    key = (dim, j)
    if key not in _LEVEL_EDGES:
        from .mesh import vmid
        m = uniform_mesh(dim, j)
        table = {}
        for eid in m.leaves:
            verts = m.verts(eid)
            if dim == 1:
                pairs = [(verts[0], verts[1])]
            else:
                pairs = [(verts[i], verts[l]) for i in range(3)
                         for l in range(i + 1, 3)]
            for a, b in pairs:
                table[vmid(a, b)] = tuple(sorted((a, b)))
        _LEVEL_EDGES[key] = table
    return _LEVEL_EDGES[key]


_APPEARANCE = {}


def _appearance_level(dim, v):
    """Smallest j with v a vertex of T_hat_j."""
    key = (dim, v)
    if key not in _APPEARANCE:
        j = 0
        while v not in _vertex_set(dim, j):
            j += 1
            if j > 20:
                raise ValueError(f"{v} not in the vertex hierarchy")
        _APPEARANCE[key] = j
    return _APPEARANCE[key]


_VSETS = {}


def _vertex_set(dim, j):
    key = (dim, j)
    if key not in _VSETS:
        _VSETS[key] = frozenset(uniform_mesh(dim, j).vertices)
    return _VSETS[key]


def parent(dim, lam: FrameIndex):
    """The parent frame index one level down (None for level 0).

    An old node keeps its key; a node new at level j (the midpoint of a
    level-(j-1) edge) is assigned the newest interior endpoint of that
    edge, which keeps conforming sets downward closed on graded meshes."""
    j, k = lam
    if j == 0:
        return None
    if dim == 1:
        # closed form: nodes are dyadic points i 2^{-(j+1)}
        from .mesh import vkey
        nx, ny, e = k
        if e <= j:
            return FrameIndex(j - 1, k)
        n = 1 << (j + 1)
        cands = [vkey(ii, 0, j + 1) for ii in (nx - 1, nx + 1)
                 if 0 < ii < n]
        if not cands:
            raise ValueError(f"{lam} has no interior parent node")
        cands.sort(key=lambda v: (-max(0, v[2] - 1), v))
        return FrameIndex(j - 1, cands[0])
    if k in node_support(dim, j - 1):
        return FrameIndex(j - 1, k)
    if k not in _midpoint_edges(dim, j - 1) and \
            k not in _adjacency(dim, j):
        raise ValueError(f"{lam} is not a frame node")
    coarse = node_support(dim, j - 1)
    cands = [v for v in _adjacency(dim, j).get(k, ()) if v in coarse]
    if not cands:
        raise ValueError(f"{lam} has no interior parent node")
    cands.sort(key=lambda v: (-_appearance_level(dim, v), v))
    return FrameIndex(j - 1, cands[0])


_ADJ = {}


def _adjacency(dim, j):
    """Vertex -> neighboring vertices along edges of T_hat_j."""
    key = (dim, j)
    if key not in _ADJ:
        m = uniform_mesh(dim, j)
        acc = {}
        for eid in m.leaves:
            verts = m.verts(eid)
            n = len(verts)
            for a in range(n):
                for b in range(a + 1, n):
                    acc.setdefault(verts[a], set()).add(verts[b])
                    acc.setdefault(verts[b], set()).add(verts[a])
        _ADJ[key] = acc
    return _ADJ[key]


def prolongation_matrix(dim, j):
    """Sparse nodal prolongation V(T_hat_{j-1}) -> V(T_hat_j)."""
    key = (dim, j)
    if key not in _PROLONG:
        from .fem import locate
        coarse = uniform_mesh(dim, j - 1)
        fine = uniform_mesh(dim, j)
        ci = {v: i for i, v in enumerate(coarse.interior_vertices)}
        rows, cols, vals = [], [], []
        for i, v in enumerate(fine.interior_vertices):
            if v in ci:
                rows.append(i)
                cols.append(ci[v])
                vals.append(1.0)
                continue
            eid = locate(coarse, vcoord(v))
            cverts = coarse.verts(eid)
            for a, cv in enumerate(cverts):
                ic = ci.get(cv)
                if ic is None:
                    continue
                hat = np.zeros(len(cverts))
                hat[a] = 1.0
                p = p1_affine_poly(coarse, eid, hat)
                x, y = vcoord(v)
                val = poly_eval(p, x, y) if dim == 2 else poly_eval(p, x)
                if abs(val) > 1e-14:
                    rows.append(i)
                    cols.append(ic)
                    vals.append(val)
        n, m = len(fine.interior_vertices), len(coarse.interior_vertices)
        _PROLONG[key] = sp.csr_matrix(
            sp.coo_matrix((vals, (rows, cols)), shape=(n, m)))
    return _PROLONG[key]


def frame_function(dim, lam: FrameIndex) -> P1Function:
    """The normalized hat psi_lambda realized on T_hat_j."""
    j, k = lam
    m = uniform_mesh(dim, j)
    nodal = np.zeros(len(m.interior_vertices))
    nodal[m.interior_vertices.index(k)] = 1.0 / node_vnorms(dim, j)[k]
    return P1Function(m, nodal)


# ---------------------------------------------------------------------------
# conforming index sets


def _hat_linear_on(dim, j, k, T):
    """True if the level-j hat at node k restricted to the coarser forest
    element T (gen(T) < d*j) is a globally linear function."""
    verts = element_verts(dim, T)
    coords = np.array([vcoord(v) for v in verts])
    vals = np.array([1.0 if v == k else 0.0 for v in verts])
    # affine extension of the vertex values
    if dim == 1:
        slope = (vals[1] - vals[0]) / (coords[1, 0] - coords[0, 0])
        aff = lambda p: vals[0] + slope * (p[0] - coords[0, 0])
    else:
        mat = np.column_stack([coords[1] - coords[0], coords[2] - coords[0]]).T
        sol = np.linalg.solve(mat, vals[1:] - vals[0])
        aff = lambda p: vals[0] + sol @ (np.asarray(p) - coords[0])
    # hat values at T_hat_j vertices inside T are delta_{k,v}
    target_gen = dim * j
    stack = [T]
    while stack:
        e = stack.pop()
        if generation(e) < target_gen:
            root, bits = e
            stack.extend([(root, bits + (0,)), (root, bits + (1,))])
            continue
        for v in element_verts(dim, e):
            want = 1.0 if v == k else 0.0
            if abs(aff(vcoord(v)) - want) > 1e-9:
                return False
    return True


def is_conforming(mesh: BisectionMesh, lam: FrameIndex,
                  interior_set=None) -> bool:
    """psi_lambda is reproduced by nodal interpolation on the mesh."""
    j, k = lam
    support = node_support(mesh.dim, j).get(k)
    if support is None:
        return False
    if interior_set is None:
        interior_set = set(mesh.interior_vertices)
    if k not in interior_set:
        return False
    checked = set()
    for e in support:
        if mesh.resolves(e):
            continue
        T = mesh.leaf_ancestor_of(e)
        if T is None or T in checked:
            continue
        checked.add(T)
        if not _hat_linear_on(mesh.dim, j, k, T):
            return False
    return True


def conforming_set(mesh: BisectionMesh):
    """S(T): all frame indices whose hats lie in V(T)."""
    jmax = max((level_of_element(mesh.dim, e) for e in mesh.leaves), default=0)
    interior = set(mesh.interior_vertices)
    out = set()
    for j in range(jmax + 1):
        sup = node_support(mesh.dim, j)
        for k in interior:
            if k in sup and is_conforming(mesh, FrameIndex(j, k), interior):
                out.add(FrameIndex(j, k))
    return out


def mesh_of(dim, indices) -> BisectionMesh:
    """Smallest conforming mesh T with the given tree-structured index set
    contained in S(T)."""
    indices = set(indices)
    for lam in indices:
        if lam.j > 0 and parent(dim, lam) not in indices:
            raise ValueError(f"index set is not a tree: parent of {lam} "
                             "missing")
    mesh = initial_mesh(dim)
    from .fem import locate
    while True:
        interior = set(mesh.interior_vertices)
        marks = set()
        for lam in indices:
            j, k = lam
            if k not in interior:
                marks.add(locate(mesh, vcoord(k)))
                continue
            for e in node_support(dim, j)[k]:
                if mesh.resolves(e):
                    continue
                T = mesh.leaf_ancestor_of(e)
                if T is not None and not _hat_linear_on(dim, j, k, T):
                    marks.add(T)
        if not marks:
            return mesh
        mesh = mesh.bisect(marks)


# ---------------------------------------------------------------------------
# frame coefficients of residual functionals


def _hat_value(dim, j, k, point):
    """phi_{j,k} at a point (unnormalized hat)."""
    from .fem import locate
    m = uniform_mesh(dim, j)
    if point == vcoord(k):
        return 1.0
    eid = locate(m, point)
    verts = m.verts(eid)
    if k not in verts:
        return 0.0
    vals = np.array([1.0 if v == k else 0.0 for v in verts])
    p = p1_affine_poly(m, eid, vals)
    return float(poly_eval(p, point[0], point[1]) if dim == 2
                 else poly_eval(p, point[0]))


def _overlap_elements(mesh_eid, j, dim):
    """T_hat_j elements overlapping the forest element `mesh_eid`:
    the unique coarser ancestor, or all descendants at generation d*j."""
    g = generation(mesh_eid)
    target = dim * j
    root, bits = mesh_eid
    if target <= g:
        return [(root, bits[:target])]
    out = []
    stack = [mesh_eid]
    while stack:
        e = stack.pop()
        if generation(e) == target:
            out.append(e)
        else:
            r, b = e
            stack.extend([(r, b + (0,)), (r, b + (1,))])
    return out


def _segment_hits_triangle(p0, p1, coords, eps=1e-12):
    """True if segment p0-p1 intersects the triangle in a set of positive
    length (used for retaining facet-overlapping frame nodes)."""
    # sample-based: the segment midpointwise clipped against the triangle
    ts = np.linspace(0.0, 1.0, 9)
    pts = p0[None, :] + ts[:, None] * (p1 - p0)[None, :]
    mat = np.column_stack([coords[1] - coords[0], coords[2] - coords[0]])
    lam = np.linalg.solve(mat, (pts - coords[0]).T).T
    inside = (lam[:, 0] >= -eps) & (lam[:, 1] >= -eps) \
        & (lam.sum(axis=1) <= 1 + eps)
    return int(inside.sum()) >= 2


def retained_indices(mesh: BisectionMesh, facets, J):
    """Theta \\ Theta_J(T): indices with |lam| <= level(K) + J for an
    overlapping element K, or |lam| <= level(E) + 2J for an overlapping
    facet E carrying data."""
    dim = mesh.dim
    out = set()
    for K in mesh.leaves:
        for j in range(level_of_element(dim, K) + J + 1):
            for e in _overlap_elements(K, j, dim):
                for v in element_verts(dim, e):
                    if not on_boundary(v, dim):
                        out.add(FrameIndex(j, v))
    for E in facets:
        if dim == 1:
            v = E if isinstance(E, tuple) and len(E) == 3 else next(iter(E))
            lE = level_of_facet(dim, v)
            x = vcoord(v)
            for j in range(lE + 2 * J + 1):
                sup = node_support(1, j)
                h = 2.0 ** (-(j + 1))
                i0 = int(round(x[0] / h))
                for i in (i0 - 1, i0, i0 + 1):
                    from .mesh import vkey
                    k = vkey(i, 0, j + 1)
                    if k in sup and abs(i * h - x[0]) < h - 1e-14:
                        out.add(FrameIndex(j, k))
        else:
            lE = level_of_facet(dim, E)
            p0, p1 = edge_param(E)
            adj = mesh.edge_map().get(E, [])
            for j in range(lE + 2 * J + 1):
                cand = set()
                for K in adj:
                    cand.update(_overlap_elements(K, j, dim))
                for e in cand:
                    verts = element_verts(dim, e)
                    coords = np.array([vcoord(v) for v in verts])
                    if not _segment_hits_triangle(p0, p1, coords):
                        continue
                    for v in verts:
                        if not on_boundary(v, dim):
                            out.add(FrameIndex(j, v))
    return out


def _elem_contribution(xi: ResidualFunctional, dim, j, k):
    """sum_K int xi_K phi_{j,k} over the support of the hat, exact."""
    mesh = xi.mesh
    total = 0.0
    um = uniform_mesh(dim, j)
    for e in node_support(dim, j)[k]:
        vals = np.array([1.0 if v == k else 0.0 for v in um.verts(e)])
        hat_poly = p1_affine_poly(um, e, vals)
        if mesh.resolves(e):
            # integrate xi's (finer or equal) element polys over pieces
            stack = [e]
            while stack:
                piece = stack.pop()
                if piece in mesh.leaves:
                    p = xi.elem.get(piece)
                    if p is None:
                        continue
                    total += _int_product(mesh, piece, p, hat_poly, dim)
                else:
                    r, b = piece
                    stack.extend([(r, b + (0,)), (r, b + (1,))])
        else:
            T = mesh.leaf_ancestor_of(e)
            p = xi.elem.get(T)
            if p is not None:
                total += _int_product(um, e, p, hat_poly, dim)
    return total


def _int_product(mesh, eid, p, q, dim):
    deg = poly_degree(p) + poly_degree(q)
    c = element_coords(mesh, eid)
    if dim == 1:
        x, w = interval_quadrature(c[0, 0], c[1, 0], deg)
        return float(np.dot(w, poly_eval(p, x) * poly_eval(q, x)))
    pts, w = triangle_quadrature(c, deg)
    return float(np.dot(w, poly_eval(p, pts[:, 0], pts[:, 1])
                        * poly_eval(q, pts[:, 0], pts[:, 1])))


def _facet_contribution(xi: ResidualFunctional, dim, j, k):
    total = 0.0
    if dim == 1:
        for E, jump in xi.facets.items():
            v = E if isinstance(E, tuple) and len(E) == 3 else next(iter(E))
            total += jump * _hat_value(1, j, k, vcoord(v))
        return total
    for E, poly_t in xi.facets.items():
        p0, p1 = edge_param(E)
        length = float(np.linalg.norm(p1 - p0))
        lE = level_of_facet(2, E)
        nsub = 1 << max(0, j - lE)
        deg = poly_degree(poly_t) + 1
        gx, gw = gauss_1d(max(1, (deg + 2) // 2))
        for i in range(nsub):
            t0, t1 = i / nsub, (i + 1) / nsub
            va = _hat_value_on_segment(dim, j, k, p0, p1, t0)
            vb = _hat_value_on_segment(dim, j, k, p0, p1, t1)
            if va == 0.0 and vb == 0.0:
                continue
            tm, th = 0.5 * (t0 + t1), 0.5 * (t1 - t0)
            tt = tm + th * gx
            hat = va + (vb - va) * (tt - t0) / (t1 - t0)
            total += float(np.dot(gw * th * length,
                                  poly_eval(poly_t, tt) * hat))
    return total


def _hat_value_on_segment(dim, j, k, p0, p1, t):
    pt = tuple(p0 + t * (p1 - p0))
    return _hat_value(dim, j, k, pt)


def frame_coefficients(xi: ResidualFunctional, J):
    """Exact dual pairings <xi, psi_lambda> for all retained indices
    (complement of Theta_J relative to xi's mesh); zero entries pruned."""
    dim = xi.mesh.dim
    if not xi.elem and not xi.facets:
        return {}
    nonzero_elems = any(np.any(np.asarray(p) != 0) for p in xi.elem.values())
    nonzero_facets = _has_facet_data(xi)
    if not nonzero_elems and not nonzero_facets:
        return {}
    out = {}
    for lam in retained_indices(xi.mesh, xi.facets, J):
        j, k = lam
        val = _elem_contribution(xi, dim, j, k)
        val += _facet_contribution(xi, dim, j, k)
        val /= node_vnorms(dim, j)[k]
        if val != 0.0:
            out[lam] = val
    return out


def _has_facet_data(xi):
    for v in xi.facets.values():
        if np.any(np.asarray(v) != 0):
            return True
    return False


# ---------------------------------------------------------------------------
# fast 1D coefficient tables (for calibration and tail studies)


def coefficient_table_1d(xi: ResidualFunctional, jmax):
    """All frame coefficients up to level jmax for a 1D functional,
    vectorized per level.  Returns {j: (nodes, values)}."""
    assert xi.mesh.dim == 1
    # breakpoints and polys of xi along (0,1)
    elems = sorted(xi.mesh.leaves,
                   key=lambda e: element_coords(xi.mesh, e)[0, 0])
    bounds = np.array([element_coords(xi.mesh, e)[0, 0] for e in elems]
                      + [1.0])
    polys = [xi.elem.get(e, np.zeros(1)) for e in elems]
    maxdeg = max((poly_degree(p) for p in polys), default=0)
    jumps = [(vcoord(next(iter(E)) if isinstance(E, frozenset) else E)[0], v)
             for E, v in xi.facets.items()]
    out = {}
    for j in range(jmax + 1):
        n = 1 << (j + 1)
        h = 1.0 / n
        grid = np.union1d(np.arange(n + 1) * h, bounds)
        mid = 0.5 * (grid[:-1] + grid[1:])
        seg_elem = np.clip(np.searchsorted(bounds, mid) - 1, 0,
                           len(elems) - 1)
        gx, gw = gauss_1d(max(1, (maxdeg + 3) // 2))
        acc = np.zeros(n + 2)
        a_all, b_all = grid[:-1], grid[1:]
        mid_all = 0.5 * (a_all + b_all)
        half_all = 0.5 * (b_all - a_all)
        i_all = np.floor(mid_all / h).astype(int)
        # per element of xi, process its segments in one vectorized batch
        for ei in np.unique(seg_elem):
            sel = seg_elem == ei
            x = mid_all[sel, None] + half_all[sel, None] * gx[None, :]
            fv = poly_eval(polys[ei], x)
            if np.ndim(fv) == 0:
                fv = np.full(x.shape, float(fv))
            tloc = (x - i_all[sel, None] * h) / h
            w = gw[None, :] * half_all[sel, None]
            np.add.at(acc, i_all[sel], np.sum(w * fv * (1 - tloc), axis=1))
            np.add.at(acc, i_all[sel] + 1, np.sum(w * fv * tloc, axis=1))
        acc = acc[:n + 1]
        for (x, v) in jumps:
            i = x / h
            i0 = int(np.floor(i + 1e-12))
            frac = i - i0
            acc[i0] += v * (1 - frac)
            if i0 + 1 <= n:
                acc[i0 + 1] += v * frac
        # interior nodes 1..n-1; V-norm of a 1D hat is sqrt(2/h)
        from .mesh import vkey
        nodes = [vkey(i, 0, j + 1) for i in range(1, n)]
        vals = acc[1:n] / np.sqrt(2.0 / h)
        out[j] = (nodes, vals)
    return out


def frame_indicators_1d(xi: ResidualFunctional, J):
    """Retained frame coefficients of a 1D functional, vectorized.

    Keeps a superset of the generic retention rule: full level tables up to
    (max element level + J), plus the per-facet node chains up to
    level(E) + 2J above that.  The omitted set is contained in the generic
    Theta_J, so the calibrated tail bound still applies."""
    assert xi.mesh.dim == 1
    mesh = xi.mesh
    from .mesh import vkey
    lmax = max(level_of_element(1, K) for K in mesh.leaves)
    jtop = lmax + J
    out = {}
    for j, (nodes, vals) in coefficient_table_1d(xi, jtop).items():
        for k, v in zip(nodes, vals):
            if v != 0.0:
                out[FrameIndex(j, k)] = float(v)
    if not xi.facets:
        return out
    # facet chains above the element window: tiny hats around each jump
    elems = sorted(mesh.leaves, key=lambda e: element_coords(mesh, e)[0, 0])
    bnds = np.array([element_coords(mesh, e)[0, 0] for e in elems] + [1.0])
    polys = [xi.elem.get(e, np.zeros(1)) for e in elems]
    jumps = sorted((vcoord(next(iter(E)) if isinstance(E, frozenset)
                           else E)[0], v) for E, v in xi.facets.items())
    jx = np.array([x for x, _ in jumps])
    lam_set = set()
    for E in xi.facets:
        v = E if isinstance(E, tuple) and len(E) == 3 else next(iter(E))
        lE = level_of_facet(1, v)
        x = vcoord(v)[0]
        for j in range(jtop + 1, lE + 2 * J + 1):
            h = 2.0 ** -(j + 1)
            i0 = int(math.floor(x / h + 1e-12))
            for i in (i0, i0 + 1):
                if 0 < i < (1 << (j + 1)) and abs(i * h - x) < h * (1 - 1e-12):
                    lam_set.add((j, i))
    for (j, i) in sorted(lam_set):
        h = 2.0 ** -(j + 1)
        xc = i * h
        val = 0.0
        # point jumps inside the support
        for t in range(np.searchsorted(jx, xc - h, side="right"),
                       np.searchsorted(jx, xc + h, side="left")):
            val += jumps[t][1] * (1.0 - abs(jumps[t][0] - xc) / h)
        # element polynomials against the two linear hat pieces
        for (a, b, rising) in ((xc - h, xc, True), (xc, xc + h, False)):
            e0 = max(0, int(np.searchsorted(bnds, a, side="right")) - 1)
            e1 = max(0, int(np.searchsorted(bnds, b, side="left")) - 1)
            for ei in range(e0, e1 + 1):
                lo, hi = max(a, bnds[ei]), min(b, bnds[ei + 1])
                if hi <= lo:
                    continue
                p = polys[ei]
                gx, gw = gauss_1d(max(1, (poly_degree(p) + 3) // 2))
                m, half = 0.5 * (lo + hi), 0.5 * (hi - lo)
                xs = m + half * gx
                hat = ((xs - (xc - h)) / h) if rising else ((xc + h - xs) / h)
                val += float(np.dot(gw * half, poly_eval(p, xs) * hat))
        val /= math.sqrt(2.0 / h)
        if val != 0.0:
            out[FrameIndex(j, vkey(i, 0, j + 1))] = val
    return out


def residual_indicators(xi: ResidualFunctional, J):
    """Dispatch: fast path in 1D, generic exact pairings in 2D."""
    if xi.mesh.dim == 1:
        return frame_indicators_1d(xi, J)
    return frame_coefficients(xi, J)


# ---------------------------------------------------------------------------
# calibration


@dataclass
class FrameConstants:
    c_psi: float
    C_psi: float
    tail: dict = field(default_factory=dict)   # (m1, m2) -> C(m1, m2)
    J0: int = 1


_CALIBRATION_CACHE = {}


def calibrate_frame_constants(dim, samples=60, seed=0, depth=None):
    """Empirical frame bounds and tail constants.

    Frame bounds: energy functionals f_w = a(w, .) of random w in V(T_hat_L)
    have ||f_w||_{V'} = |w|_{H1} exactly; the frame coefficient vector is
    computed exactly through cached stiffness/prolongation matrices.  Tail
    constants C(m1, m2) bound the relative Theta_J coefficient mass by
    C 2^{-J}; a 20% safety margin is applied.
    """
    rng = np.random.default_rng(seed)
    if depth is None:
        depth = 6 if dim == 1 else 4
    maxL = 4 if dim == 1 else 2
    stiff = {}
    for j in range(maxL + depth + 1):
        m = uniform_mesh(dim, j)
        stiff[j] = assemble_stiffness(
            PiecewisePolyCoefficient.constant(m, 1.0), m)
    norms = {j: np.array([node_vnorms(dim, j)[v]
                          for v in uniform_mesh(dim, j).interior_vertices])
             for j in range(maxL + depth + 1)}
    ratios = []
    growth = []
    for _ in range(samples):
        L = int(rng.integers(0, maxL + 1))
        mL = uniform_mesh(dim, L)
        w = rng.standard_normal(len(mL.interior_vertices))
        dual = np.sqrt(float(w @ (stiff[L] @ w)))
        if dual == 0:
            continue
        total = 0.0
        per_level = []
        vec = w.copy()
        # coarser levels: restrict through prolongation transposes
        Aw = stiff[L] @ w
        down = Aw.copy()
        coefs = {L: Aw / norms[L]}
        for j in range(L, 0, -1):
            down = prolongation_matrix(dim, j).T @ down
            coefs[j - 1] = down / norms[j - 1]
        up = w.copy()
        for j in range(L + 1, L + depth + 1):
            up = prolongation_matrix(dim, j) @ up
            coefs[j] = (stiff[j] @ up) / norms[j]
        for j in sorted(coefs):
            s = float(coefs[j] @ coefs[j])
            total += s
            per_level.append(s)
        ratios.append(np.sqrt(total) / dual)
        growth.append(per_level[-1] / max(total, 1e-300))
    if max(growth) > 0.5:
        raise RuntimeError("frame coefficient mass not decaying with level; "
                           "frame bug")
    c_psi, C_psi = min(ratios), max(ratios)
    tail = {}
    if dim == 1:
        for m1m2 in ((0, 0), (1, 1)):
            tail[m1m2] = _calibrate_tail_1d(m1m2, rng, depth)
    else:
        # reuse the 1D-calibrated decay structure at matching degrees,
        # scaled conservatively; full 2D tail studies are desk-scale only
        for m1m2 in ((0, 0), (1, 1)):
            tail[m1m2] = 2.0 * _calibrate_tail_1d(m1m2, rng, depth)
    C = max(tail.values())
    J0 = max(1, int(np.ceil(np.log2(2.0 * C))))
    return FrameConstants(c_psi=c_psi, C_psi=C_psi, tail=tail, J0=J0)


def _random_residual_1d(mesh, m1, m2, rng):
    elem = {}
    for e in mesh.leaves:
        elem[e] = rng.standard_normal(m1 + 1)
    facets = {}
    for v in mesh.interior_vertices:
        facets[frozenset((v,))] = float(rng.standard_normal())
    return ResidualFunctional(mesh, elem, facets, m1, m2)


def _calibrate_tail_1d(m1m2, rng, depth, nsamples=100):
    m1, m2 = m1m2
    worst = 0.0
    # alternate uniform and graded meshes up to level 4: the tail
    # constant degrades on nonuniform meshes, so calibrating on uniform
    # ones alone underestimates it
    for s in range(nsamples):
        if s % 2 == 0:
            lvl = int(rng.integers(1, 5))
            mesh = uniform_mesh(1, lvl)
        else:
            from .mesh import initial_mesh, level_of_element
            mesh = initial_mesh(1)
            for _ in range(int(rng.integers(3, 12))):
                leaves = [e for e in sorted(mesh.leaves)
                          if level_of_element(1, e) < 4]
                if not leaves:
                    break
                mesh = mesh.bisect([leaves[rng.integers(len(leaves))]])
            lvl = max(level_of_element(1, e) for e in mesh.leaves)
        xi = _random_residual_1d(mesh, m1, m2, rng)
        jmax = min(14, lvl + depth + 4)
        table = coefficient_table_1d(xi, jmax)
        total = sum(float(v @ v) for _, v in table.values())
        if total == 0:
            continue
        for J in range(1, 5):
            kept = retained_indices(mesh, xi.facets, J)
            tail_sq = 0.0
            for j, (nodes, vals) in table.items():
                for k, val in zip(nodes, vals):
                    if FrameIndex(j, k) not in kept:
                        tail_sq += val * val
            worst = max(worst, np.sqrt(tail_sq / total) * 2.0 ** J)
    return 1.2 * worst


def get_frame_constants(dim):
    """Memoized default calibration (seeded, deterministic)."""
    if dim not in _CALIBRATION_CACHE:
        _CALIBRATION_CACHE[dim] = calibrate_frame_constants(dim)
    return _CALIBRATION_CACHE[dim]


# ---------------------------------------------------------------------------
# stable decomposition


def _vertex_leaf_map(mesh):
    acc = {}
    for eid in mesh.leaves:
        for v in mesh.verts(eid):
            acc.setdefault(v, []).append(eid)
    return acc


def _eval_on_leaf(fun: P1Function, eid, point):
    p = fun.as_poly_on(eid)
    return float(poly_eval(p, point[0], point[1]) if fun.mesh.dim == 2
                 else poly_eval(p, point[0]))


def stable_decomposition(v: P1Function):
    """Coefficients z over S(T) with sum z_lam psi_lam = v and
    ||z|| <~ ||v||_V.

    Top-down peeling over the common coarsenings T_j = coarsen(T, T_hat_j):
    at each level the current function g_j in V(T_j) is split into a level-j
    nodal remainder s_j (emitted) and an interpolant onto T_{j-1}.  In
    regions fully refined to level j the interpolant carries L2-projection
    values (this is what makes the decomposition stable); elsewhere it
    interpolates g_j, which keeps s_j supported on conforming nodes.
    """
    mesh = v.mesh
    dim = mesh.dim
    jmax = max((level_of_element(dim, e) for e in mesh.leaves), default=0)
    vnorm2 = float(v.nodal @ (assemble_stiffness(
        PiecewisePolyCoefficient.constant(mesh, 1.0), mesh) @ v.nodal))
    tol = 1e-11 * max(1.0, np.sqrt(vnorm2))
    # L2 projections of v onto the uniform spaces
    vdata = p1_as_coefficient(v)
    proj = {}
    for j in range(jmax):
        um = uniform_mesh(dim, j)
        M = assemble_mass(um)
        b = assemble_load(vdata, um)
        proj[j] = P1Function(um, spla.spsolve(M.tocsc(), b))
    z = {}
    g = v
    meshes = {j: coarsen(mesh, uniform_mesh(dim, j))
              for j in range(jmax + 1)}
    for j in range(jmax, 0, -1):
        Tj, Tjm1 = meshes[j], meshes[j - 1]
        vl = _vertex_leaf_map(Tj)
        fully_fine = {}
        for x in Tjm1.vertices:
            leaves = vl.get(x, [])
            fully_fine[x] = bool(leaves) and all(
                generation(e) == dim * j for e in leaves)
        ghat_nodal = np.zeros(len(Tjm1.interior_vertices))
        for i, x in enumerate(Tjm1.interior_vertices):
            if fully_fine[x]:
                ghat_nodal[i] = proj[j - 1].value_at_vertex(x)
            else:
                ghat_nodal[i] = g.value_at_vertex(x) if x in g._index else \
                    _eval_on_leaf(g, vl[x][0], vcoord(x))
        ghat = P1Function(Tjm1, ghat_nodal)
        # candidate emission nodes: vertices of level-j-active leaves
        cand = {}
        for e in Tj.leaves:
            if generation(e) < dim * j - 1:
                continue
            for sub in _overlap_elements(e, j, dim):
                for x in element_verts(dim, sub):
                    if not on_boundary(x, dim):
                        cand.setdefault(x, e)
        norms = node_vnorms(dim, j)
        for x, e in cand.items():
            pt = vcoord(x)
            gv = _eval_on_leaf(g, e, pt)
            T = Tjm1.leaf_ancestor_of(e) or e
            hv = _eval_on_leaf(ghat, T, pt)
            s = gv - hv
            if abs(s) > tol:
                z[FrameIndex(j, x)] = s * norms[x]
        g = ghat
    norms0 = node_vnorms(dim, 0)
    for x in uniform_mesh(dim, 0).interior_vertices:
        s = g.value_at_vertex(x) if x in g._index else 0.0
        if abs(s) > tol:
            z[FrameIndex(0, x)] = s * norms0[x]
    return z


def reconstruct(dim, z, jmax=None) -> P1Function:
    """sum_lam z_lam psi_lam realized on T_hat_jmax."""
    if jmax is None:
        jmax = max((lam.j for lam in z), default=0)
    cur = None
    for j in range(jmax + 1):
        um = uniform_mesh(dim, j)
        nodal = np.zeros(len(um.interior_vertices))
        if cur is not None:
            nodal += prolongation_matrix(dim, j) @ cur
        norms = node_vnorms(dim, j)
        idx = {vv: i for i, vv in enumerate(um.interior_vertices)}
        for lam, val in z.items():
            if lam.j == j:
                nodal[idx[lam.node]] += val / norms[lam.node]
        cur = nodal
    return P1Function(uniform_mesh(dim, jmax), cur)
