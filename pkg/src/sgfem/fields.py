"""Multilevel coefficient expansions theta_mu and parametrizations a(y).

The expansion functions are piecewise polynomials supported on dyadic boxes:
a box (l, ix, iy) is the cell [ix, ix+1] x [iy, iy+1] scaled by 2^-l (the
second coordinate is ignored for dim = 1).  Each theta_mu at raw level
``level`` lives on at most K boxes of raw level ``level + tau`` and carries a
polynomial of degree <= m per box, with sup-norm <= amplitude * 2^(-alpha *
level).

Coloring assigns each function a qlevel |mu|_Q = Q*level + color such that
same-qlevel supports are disjoint, which is what makes the per-point
interaction chains unique.
"""
from __future__ import annotations

import numpy as np

from .indices import ExpansionLabel


# ---------------------------------------------------------------------------
# dyadic boxes


def box_ancestor(box, level):
    l, ix, iy = box
    if level > l:
        raise ValueError("ancestor level must be <= box level")
    s = l - level
    return (level, ix >> s, iy >> s)


def box_children(box, dim):
    l, ix, iy = box
    if dim == 1:
        return [(l + 1, 2 * ix, 0), (l + 1, 2 * ix + 1, 0)]
    return [(l + 1, 2 * ix + dx, 2 * iy + dy)
            for dx in (0, 1) for dy in (0, 1)]


def box_descendants(box, level, dim):
    out = [box]
    while out[0][0] < level:
        out = [c for b in out for c in box_children(b, dim)]
    return out


def box_corners(box, dim):
    l, ix, iy = box
    h = 2.0 ** (-l)
    if dim == 1:
        return [(ix * h, 0.0), ((ix + 1) * h, 0.0)]
    return [((ix + dx) * h, (iy + dy) * h) for dx in (0, 1) for dy in (0, 1)]


def box_center(box, dim):
    l, ix, iy = box
    h = 2.0 ** (-l)
    if dim == 1:
        return ((ix + 0.5) * h, 0.0)
    return ((ix + 0.5) * h, (iy + 0.5) * h)


def point_box(x, y, level, dim):
    n = 1 << level
    ix = min(int(x * n), n - 1)
    iy = min(int(y * n), n - 1) if dim == 2 else 0
    return (level, ix, iy)


def poly_eval(coeff, x, y):
    """Evaluate a global-monomial polynomial; coeff is 1D (in x) or 2D."""
    c = np.asarray(coeff)
    if c.ndim == 1:
        return float(np.polynomial.polynomial.polyval(x, c))
    return float(np.polynomial.polynomial.polyval2d(x, y, c))


class ThetaFunction:
    """One expansion function: polynomials on its support boxes."""

    __slots__ = ("level", "position", "qlevel", "boxes", "polys")

    def __init__(self, level, position, boxes, polys):
        self.level = level
        self.position = position
        self.qlevel = None  # assigned by coloring
        self.boxes = list(boxes)
        self.polys = [np.asarray(p, dtype=float) for p in polys]

    @property
    def label(self):
        return ExpansionLabel(self.level, self.position, self.qlevel)

    def __call__(self, x, y=0.0):
        for box, poly in zip(self.boxes, self.polys):
            l, ix, iy = box
            h = 2.0 ** (-l)
            if ix * h <= x <= (ix + 1) * h and iy * h <= y <= (iy + 1) * h:
                return poly_eval(poly, x, y)
        return 0.0

    def eval_on_box(self, box, x, y=0.0):
        """Value at (x, y) assuming (x, y) lies in `box`; 0 if unsupported."""
        for b, poly in zip(self.boxes, self.polys):
            if b[0] <= box[0] and box_ancestor(box, b[0]) == b:
                return poly_eval(poly, x, y)
        return 0.0

    def sup_abs(self, dim):
        """Exact sup-norm for degree <= 1 (extremes at box corners)."""
        s = 0.0
        for box, poly in zip(self.boxes, self.polys):
            for (cx, cy) in box_corners(box, dim):
                s = max(s, abs(poly_eval(poly, cx, cy)))
        return s


class CoefficientField:
    """A validated finite multilevel family {theta_mu}."""

    def __init__(self, dim, alpha, theta0, thetas, m, tau, K, max_level):
        self.dim = dim
        self.alpha = alpha
        self.theta0 = float(theta0)
        self.m = m
        self.tau = tau
        self.K = K
        self.max_level = max_level
        self.levels = {}  # raw level -> list of ThetaFunction
        for th in thetas:
            self.levels.setdefault(th.level, []).append(th)
        self.Q = None
        self.by_qlevel = {}
        self._chain_cache = {}
        self._color()
        self._validate()

    # -- coloring ----------------------------------------------------------

    def _overlap(self, a: ThetaFunction, b: ThetaFunction):
        lmax = max(x[0] for x in a.boxes + b.boxes)
        sa = {d for bx in a.boxes for d in box_descendants(bx, lmax, self.dim)}
        sb = {d for bx in b.boxes for d in box_descendants(bx, lmax, self.dim)}
        return bool(sa & sb)

    def _color(self):
        colors = {}
        ncolors = 1
        for lvl, ths in sorted(self.levels.items()):
            ths.sort(key=lambda t: t.position)
            for i, th in enumerate(ths):
                used = {colors[id(o)] for o in ths[:i]
                        if self._overlap(th, o)}
                c = 0
                while c in used:
                    c += 1
                colors[id(th)] = c
                ncolors = max(ncolors, c + 1)
        self.Q = ncolors
        for lvl, ths in self.levels.items():
            for th in ths:
                th.qlevel = self.Q * lvl + colors[id(th)]
                self.by_qlevel.setdefault(th.qlevel, []).append(th)

    # -- validation --------------------------------------------------------

    def _validate(self):
        self.validation = {}
        ratios = []
        for lvl, ths in self.levels.items():
            for th in ths:
                lo = min(b[1] * 2.0 ** -b[0] for b in th.boxes)
                hi = max((b[1] + 1) * 2.0 ** -b[0] for b in th.boxes)
                ratios.append((hi - lo) / 2.0 ** (-lvl))
        if ratios:
            self.validation["diam_ratio"] = (min(ratios), max(ratios))
        # sup-norm decay fit over levels
        lv, sup = [], []
        for lvl, ths in sorted(self.levels.items()):
            s = max(th.sup_abs(self.dim) for th in ths)
            lv.append(lvl)
            sup.append(s)
        if len(lv) >= 2:
            slope = np.polyfit(lv, np.log2(sup), 1)[0]
            self.validation["decay_exponent"] = -slope
        # disjointness of same-qlevel supports
        for q, ths in self.by_qlevel.items():
            for i, a in enumerate(ths):
                for b in ths[i + 1:]:
                    if self._overlap(a, b):
                        raise ValueError(
                            f"coloring failed: overlap within qlevel {q}")

    # -- queries -----------------------------------------------------------

    @property
    def max_qlevel(self):
        return max(self.by_qlevel) if self.by_qlevel else -1

    def all_thetas(self):
        for lvl in sorted(self.levels):
            yield from self.levels[lvl]

    def finest_raw_level(self, qlevels=None):
        if qlevels is None:
            lvls = list(self.levels)
        else:
            lvls = [q // self.Q for q in qlevels]
        return (max(lvls) if lvls else 0) + self.tau

    def qlevel_scale(self, q):
        """c_q = sup over the qlevel's functions of |theta_mu|."""
        ths = self.by_qlevel.get(q, [])
        return max((th.sup_abs(self.dim) for th in ths), default=0.0)

    def active_theta(self, q, box):
        """The unique theta of qlevel q whose support contains `box`
        (a box at raw level >= level + tau), or None."""
        for th in self.by_qlevel.get(q, []):
            for b in th.boxes:
                if b[0] <= box[0] and box_ancestor(box, b[0]) == b:
                    return th
        return None

    def support_chains(self, qlevels):
        """Tuples of active labels (one per requested qlevel, None when the
        qlevel has no function on the region), one per maximal region."""
        key = tuple(sorted(qlevels))
        if key in self._chain_cache:
            return self._chain_cache[key]
        fine = self.finest_raw_level(key)
        n = 1 << fine
        chains = set()
        ny = n if self.dim == 2 else 1
        for ix in range(n):
            for iy in range(ny):
                box = (fine, ix, iy)
                chain = []
                for q in key:
                    th = self.active_theta(q, box)
                    chain.append(None if th is None else th.label)
                chains.add(tuple(chain))
        self._chain_cache[key] = chains
        return chains

    def theta_by_label(self, label):
        for th in self.levels.get(label.level, []):
            if th.position == label.position:
                return th
        raise KeyError(label)

    def abs_qlevel_sum_at(self, q, x, y=0.0):
        return sum(abs(th(x, y)) for th in self.by_qlevel.get(q, []))

    def affine_range(self):
        """(essinf, esssup) of theta0 -/+ sum |theta_mu|, exact for m <= 1
        (corner evaluation on the finest grid)."""
        fine = self.finest_raw_level()
        n = 1 << fine
        ny = n if self.dim == 2 else 1
        lo, hi = np.inf, -np.inf
        for ix in range(n):
            for iy in range(ny):
                for (cx, cy) in box_corners((fine, ix, iy), self.dim):
                    s = sum(abs(th.eval_on_box((fine, ix, iy), cx, cy))
                            for th in self.all_thetas())
                    lo = min(lo, self.theta0 - s)
                    hi = max(hi, self.theta0 + s)
        return lo, hi


# ---------------------------------------------------------------------------
# built-in families


def _sign(ix, iy, lvl, rng):
    if rng is not None:
        return 1.0 if rng.random() < 0.5 else -1.0
    return 1.0 if (ix + iy + lvl) % 2 == 0 else -1.0


def build_haar_multilevel(dim, alpha, max_level, amplitude, theta0=1.0,
                          kind="affine", seed=None):
    """Piecewise-constant bumps (m=0, tau=0): one theta per dyadic cell of
    side 2^-l, value +/- amplitude * 2^(-alpha l), checkerboard signs
    (random signs when a seed is given)."""
    rng = np.random.default_rng(seed) if seed is not None else None
    thetas = []
    for lvl in range(max_level + 1):
        n = 1 << lvl
        ny = n if dim == 2 else 1
        for iy in range(ny):
            for ix in range(n):
                val = _sign(ix, iy, lvl, rng) * amplitude * 2.0 ** (-alpha * lvl)
                poly = np.array([val]) if dim == 1 else np.array([[val]])
                pos = iy * n + ix
                thetas.append(ThetaFunction(lvl, pos, [(lvl, ix, iy)], [poly]))
    field = CoefficientField(dim, alpha, theta0, thetas, m=0, tau=0,
                             K=1, max_level=max_level)
    _check_ellipticity(field, kind)
    return field


def build_hat_multilevel(alpha, max_level, amplitude, theta0=1.0,
                         kind="affine"):
    """1D overlapping hat bumps (m=1, tau=1): at raw level l >= 1, hats at
    the interior nodes p/2^l with support of width 2^(1-l); level 0 is the
    single hat at 1/2.  Exercises m > 0 and the 2-coloring path."""
    thetas = []
    for lvl in range(max_level + 1):
        n = 1 << lvl
        amp = amplitude * 2.0 ** (-alpha * lvl)
        h = 1.0 / n
        positions = range(1, n) if lvl >= 1 else [None]
        if lvl == 0:
            # single hat at 1/2 with support (0,1), boxes at raw level 1
            cells = [(1, 0, 0), (1, 1, 0)]
            polys = [np.array([0.0, 2.0 * amp]),
                     np.array([2.0 * amp, -2.0 * amp])]
            thetas.append(ThetaFunction(0, 0, cells, polys))
            continue
        for p in positions:
            node = p * h
            cells, polys = [], []
            # rising part on [node-h, node], falling on [node, node+h];
            # stored on boxes of raw level lvl+1 (tau = 1)
            for half in (0, 1):
                x0 = node - h + half * h
                slope = amp / h if half == 0 else -amp / h
                const = amp - slope * node
                for sub in (0, 1):
                    ix = int(round((x0 + sub * h / 2) * 2 ** (lvl + 1)))
                    cells.append((lvl + 1, ix, 0))
                    polys.append(np.array([const, slope]))
            thetas.append(ThetaFunction(lvl, p - 1, cells, polys))
    field = CoefficientField(1, alpha, theta0, thetas, m=1, tau=1,
                             K=4, max_level=max_level)
    _check_ellipticity(field, kind)
    return field


# ---------------------------------------------------------------------------
# parametrizations


class Parametrization:
    """How the affine germ theta0 + sum y_mu theta_mu enters the coefficient.

    kind: 'affine'  -> a = theta0 + sum y theta
          'logaffine' -> a = exp(theta0 + sum y theta)
          'analytic' -> a = f(sum y theta), with an analyticity certificate
                        (M, rho, alpha_prime) for the Chebyshev decay check.
    """

    def __init__(self, kind, f=None, certificate=None):
        if kind not in ("affine", "logaffine", "analytic"):
            raise ValueError(kind)
        self.kind = kind
        self.f = f
        self.certificate = certificate or {}

    @classmethod
    def affine(cls):
        return cls("affine")

    @classmethod
    def logaffine(cls):
        return cls("logaffine")

    @classmethod
    def analytic(cls, f, M, rho, alpha_prime):
        return cls("analytic", f=f,
                   certificate={"M": M, "rho": rho, "alpha_prime": alpha_prime})


class EllipticityBounds:
    def __init__(self, cB, CB):
        if not (0 < cB <= CB):
            raise ValueError(f"invalid ellipticity bounds ({cB}, {CB})")
        self.cB = cB
        self.CB = CB

    def __repr__(self):
        return f"EllipticityBounds(cB={self.cB:.6g}, CB={self.CB:.6g})"


def _check_ellipticity(field, kind):
    lo, hi = field.affine_range()
    if kind == "affine" and lo <= 0:
        raise ValueError(f"affine ellipticity violated: essinf = {lo}")
    return lo, hi


def ellipticity_bounds(field, param) -> EllipticityBounds:
    lo, hi = field.affine_range()
    if param.kind == "affine":
        if lo <= 0:
            raise ValueError(f"affine ellipticity violated: essinf = {lo}")
        return EllipticityBounds(lo, hi)
    if param.kind == "logaffine":
        return EllipticityBounds(float(np.exp(lo)), float(np.exp(hi)))
    # analytic: f applied to the germ without theta0; sample the range
    span = max(abs(lo - field.theta0), abs(hi - field.theta0))
    zz = np.linspace(-span, span, 2001)
    vals = np.array([param.f(z) for z in zz])
    if vals.min() <= 0:
        raise ValueError("analytic parametrization not uniformly elliptic "
                         "on the sampled range")
    return EllipticityBounds(float(vals.min()), float(vals.max()))


def evaluate_a(field, param, x, y_assignment, ypos=0.0):
    """Pointwise coefficient value; y_assignment maps labels (or
    (level, position) pairs) to parameter values in [-1, 1]."""
    germ = 0.0
    for th in field.all_thetas():
        yv = y_assignment.get(th.label,
                              y_assignment.get((th.level, th.position), 0.0))
        if yv:
            germ += yv * th(x, ypos)
    if param.kind == "affine":
        return field.theta0 + germ
    if param.kind == "logaffine":
        return float(np.exp(field.theta0 + germ))
    return float(param.f(germ))
