"""Conforming simplicial bisection meshes on D = (0,1)^d, d in {1,2}.

Elements are nodes of the binary bisection forest over the initial mesh:
an element id is (root, bits) where bits records the child choices.  The
geometry of any id is derived deterministically by replaying bisections
from the root simplex, so meshes are just sets of leaf ids; overlay and
coarsening become set operations on the forest.

Vertices are exact dyadic rationals (nx, ny, e) meaning (nx/2^e, ny/2^e),
normalized so that not both numerators are even (unless e = 0); midpoints
are exact, which makes vertex dedup and conformity checks exact.

d = 2 uses newest-vertex bisection: a simplex is stored as (v0, v1, peak)
with refinement edge v0-v1; its children are (v0, peak, m) and
(v1, peak, m) with the midpoint m as the new peak.  The initial mesh (the
unit square split by both diagonals, peaks at the center) is compatibly
labeled, so recursive closure terminates and meshes stay conforming.
"""
from __future__ import annotations

from math import gcd

# ---------------------------------------------------------------------------
# dyadic vertices


def vkey(nx, ny, e):
    while e > 0 and nx % 2 == 0 and ny % 2 == 0:
        nx //= 2
        ny //= 2
        e -= 1
    return (nx, ny, e)


def vmid(a, b):
    ax, ay, ae = a
    bx, by, be = b
    e = max(ae, be) + 1
    return vkey((ax << (e - 1 - ae)) + (bx << (e - 1 - be)),
                (ay << (e - 1 - ae)) + (by << (e - 1 - be)), e)


def vcoord(v):
    nx, ny, e = v
    s = 2.0 ** (-e)
    return (nx * s, ny * s)


def on_boundary(v, dim):
    nx, ny, e = v
    if nx == 0 or nx == (1 << e):
        return True
    if dim == 2 and (ny == 0 or ny == (1 << e)):
        return True
    return False


# ---------------------------------------------------------------------------
# element geometry replay

_ROOTS = {
    1: [((0, 0, 0), (1, 0, 1)), ((1, 0, 1), (1, 0, 0))],
    2: [
        ((0, 0, 0), (1, 0, 0), (1, 1, 1)),
        ((1, 0, 0), (1, 1, 0), (1, 1, 1)),
        ((1, 1, 0), (0, 1, 0), (1, 1, 1)),
        ((0, 1, 0), (0, 0, 0), (1, 1, 1)),
    ],
}

_GEOM_CACHE = {}


def children_verts(verts):
    """Vertex tuples of the two bisection children."""
    if len(verts) == 2:
        v0, v1 = verts
        m = vmid(v0, v1)
        return (v0, m), (m, v1)
    v0, v1, peak = verts
    m = vmid(v0, v1)
    return (v0, peak, m), (v1, peak, m)


def element_verts(dim, eid):
    key = (dim, eid)
    cached = _GEOM_CACHE.get(key)
    if cached is not None:
        return cached
    root, bits = eid
    verts = _ROOTS[dim][root]
    partial = (root, ())
    for i, b in enumerate(bits):
        partial = (root, bits[: i + 1])
        pk = (dim, partial)
        if pk in _GEOM_CACHE:
            verts = _GEOM_CACHE[pk]
        else:
            verts = children_verts(verts)[b]
            _GEOM_CACHE[pk] = verts
    _GEOM_CACHE[key] = verts
    return verts


def generation(eid):
    return len(eid[1])


def level_of_element(dim, eid):
    """Smallest j such that the uniform mesh T_hat_j resolves the element."""
    g = generation(eid)
    return -(-g // dim)  # ceil(g / dim)


def ref_edge(verts):
    return frozenset(verts[:2])


def element_edges(verts):
    n = len(verts)
    if n == 2:
        return [frozenset((verts[0],)), frozenset((verts[1],))]
    return [frozenset((verts[i], verts[j]))
            for i in range(3) for j in range(i + 1, 3)]


# ---------------------------------------------------------------------------
# meshes


class BisectionMesh:
    """Immutable conforming mesh: a set of leaf ids of the bisection forest."""

    __slots__ = ("dim", "leaves", "_splits", "_vertices", "_interior")

    def __init__(self, dim, leaf_ids):
        self.dim = dim
        self.leaves = frozenset(leaf_ids)
        self._splits = None
        self._vertices = None
        self._interior = None

    # -- derived data ------------------------------------------------------

    @property
    def splits(self):
        """All interior (split) node ids of the forest."""
        if self._splits is None:
            s = set()
            for root, bits in self.leaves:
                for i in range(len(bits)):
                    s.add((root, bits[:i]))
            self._splits = frozenset(s)
        return self._splits

    def element_list(self):
        return sorted(self.leaves)

    def verts(self, eid):
        return element_verts(self.dim, eid)

    @property
    def vertices(self):
        if self._vertices is None:
            vs = set()
            for eid in self.leaves:
                vs.update(self.verts(eid))
            self._vertices = sorted(vs)
        return self._vertices

    @property
    def interior_vertices(self):
        if self._interior is None:
            self._interior = [v for v in self.vertices
                              if not on_boundary(v, self.dim)]
        return self._interior

    def edge_map(self):
        em = {}
        for eid in self.leaves:
            for E in element_edges(self.verts(eid)):
                em.setdefault(E, []).append(eid)
        return em

    def is_conforming(self):
        if self.dim == 1:
            return True
        for E, els in self.edge_map().items():
            if len(els) == 2:
                continue
            if len(els) == 1 and all(on_boundary(v, 2) for v in E) \
                    and _edge_on_boundary(E):
                continue
            return False
        return True

    def leaf_ancestor_of(self, eid):
        """The leaf containing the forest node `eid` (or None)."""
        root, bits = eid
        for i in range(len(bits) + 1):
            cand = (root, bits[:i])
            if cand in self.leaves:
                return cand
        return None

    def resolves(self, eid):
        """True if the element `eid` is a union of mesh elements."""
        root, bits = eid
        return eid in self.leaves or eid in self.splits

    def __eq__(self, other):
        return (isinstance(other, BisectionMesh) and self.dim == other.dim
                and self.leaves == other.leaves)

    def __hash__(self):
        return hash((self.dim, self.leaves))

    def __len__(self):
        return len(self.leaves)

    # -- refinement --------------------------------------------------------

    def bisect(self, marked):
        """Bisect the marked leaves; restore conformity by recursive closure.
        Returns a new mesh."""
        marked = [m for m in marked if m in self.leaves]
        if not marked:
            return self
        leaves = dict.fromkeys(self.leaves)
        if self.dim == 1:
            for eid in marked:
                _split(leaves, eid)
            return BisectionMesh(1, leaves)
        em = {}
        for eid in leaves:
            for E in element_edges(element_verts(2, eid)):
                if len(E) == 2:
                    em.setdefault(E, set()).add(eid)
        for eid in marked:
            _refine_closure(leaves, em, eid)
        return BisectionMesh(2, leaves)

    def refine_until_resolved(self, ids):
        """Smallest conforming refinement resolving every forest node in
        `ids` (each id must be a descendant-or-self of this mesh)."""
        mesh = self
        pending = list(ids)
        while True:
            marks = set()
            for eid in pending:
                if not mesh.resolves(eid):
                    leaf = mesh.leaf_ancestor_of(eid)
                    if leaf is None:
                        raise ValueError(f"{eid} incompatible with mesh")
                    marks.add(leaf)
            if not marks:
                return mesh
            mesh = mesh.bisect(marks)

    # -- dump --------------------------------------------------------------

    def dump(self):
        lines = []
        for eid in self.element_list():
            parts = []
            for (nx, ny, e) in self.verts(eid):
                if self.dim == 1:
                    parts.append(f"{nx} {e}")
                else:
                    parts.append(f"{nx} {e} {ny} {e}")
            parts.append(str(generation(eid)))
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"


def _edge_on_boundary(E):
    """Both endpoints on the same face of the unit square."""
    a, b = tuple(E)
    for coord in (0, 1):
        for side in (0, 1):
            if a[coord] == side * (1 << a[2]) and \
                    b[coord] == side * (1 << b[2]):
                return True
    return False


def _split(leaves, eid):
    del leaves[eid]
    root, bits = eid
    leaves[(root, bits + (0,))] = None
    leaves[(root, bits + (1,))] = None


def _split2(leaves, em, eid):
    verts = element_verts(2, eid)
    for E in element_edges(verts):
        if len(E) == 2:
            em[E].discard(eid)
    del leaves[eid]
    root, bits = eid
    for b in (0, 1):
        cid = (root, bits + (b,))
        leaves[cid] = None
        for E in element_edges(element_verts(2, cid)):
            if len(E) == 2:
                em.setdefault(E, set()).add(cid)


def _refine_closure(leaves, em, eid):
    stack = [eid]
    guard = 0
    while stack:
        guard += 1
        if guard > 10_000_000:
            raise RuntimeError("conformity closure did not terminate")
        e = stack[-1]
        if e not in leaves:
            stack.pop()
            continue
        E = ref_edge(element_verts(2, e))
        nbs = [o for o in em.get(E, ()) if o != e]
        nb = nbs[0] if nbs else None
        if nb is not None and ref_edge(element_verts(2, nb)) != E:
            stack.append(nb)
            continue
        _split2(leaves, em, e)
        if nb is not None:
            _split2(leaves, em, nb)
        stack.pop()


# ---------------------------------------------------------------------------
# constructors, hierarchy, overlay


def initial_mesh(dim):
    return BisectionMesh(dim, [(r, ()) for r in range(len(_ROOTS[dim]))])


_UNIFORM_CACHE = {}


def uniform_mesh(dim, j):
    """T_hat_j: every element of T_hat_{j-1} bisected d times."""
    if j > 14:
        raise ValueError("uniform level too large for the memory budget")
    key = (dim, j)
    if key not in _UNIFORM_CACHE:
        if j == 0:
            _UNIFORM_CACHE[key] = initial_mesh(dim)
        else:
            m = uniform_mesh(dim, j - 1)
            for _ in range(dim):
                m = m.bisect(m.leaves)
            _UNIFORM_CACHE[key] = m
    return _UNIFORM_CACHE[key]


def node_set(dim, j):
    """N_j: interior vertices of T_hat_j."""
    return uniform_mesh(dim, j).interior_vertices


def overlay(a: BisectionMesh, b: BisectionMesh) -> BisectionMesh:
    """Smallest common refinement."""
    if a.dim != b.dim:
        raise ValueError("meshes from different hierarchies")
    if a is b or a == b:
        return a
    splits = a.splits | b.splits
    return _mesh_from_splits(a.dim, splits)


def coarsen(a: BisectionMesh, b: BisectionMesh) -> BisectionMesh:
    """Finest common coarsening."""
    if a.dim != b.dim:
        raise ValueError("meshes from different hierarchies")
    if a is b or a == b:
        return a
    splits = a.splits & b.splits
    return _mesh_from_splits(a.dim, splits)


def _mesh_from_splits(dim, splits):
    leaves = []
    stack = [(r, ()) for r in range(len(_ROOTS[dim]))]
    while stack:
        eid = stack.pop()
        if eid in splits:
            root, bits = eid
            stack.append((root, bits + (0,)))
            stack.append((root, bits + (1,)))
        else:
            leaves.append(eid)
    return BisectionMesh(dim, leaves)


def level_of_facet(dim, facet, cap=14):
    """For d=1 a facet is a vertex key; for d=2 an edge (frozenset of two
    keys).  Returns the unique uniform level containing the facet."""
    if dim == 1:
        nx, ny, e = facet
        return max(0, e - 1)
    for j in range(cap + 1):
        if facet in _uniform_edges(j):
            return j
    raise ValueError("facet not from the bisection hierarchy")


_UNIFORM_EDGES = {}


def _uniform_edges(j):
    if j not in _UNIFORM_EDGES:
        _UNIFORM_EDGES[j] = frozenset(uniform_mesh(2, j).edge_map().keys())
    return _UNIFORM_EDGES[j]
