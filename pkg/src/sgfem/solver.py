"""Adaptive stochastic Galerkin driver.

One iteration estimates the residual in the hierarchical hat frame
(compressed operator application + exact frame coefficients up to a
provably safe level window), extends the active pair set (stochastic mode,
frame index) by a tree-structured greedy capture, regenerates the per-mode
meshes, and solves the compressed Galerkin system with block-preconditioned
conjugate gradients.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .apply_plan import GalerkinVector, execute_apply, plan_apply
from .compress import (_mesh_level_for_boxes, _theta_poly_on_box,
                       block_coefficient_polys, build_scheme_affine,
                       build_scheme_nonlinear)
from .fem import (P1Function, PiecewisePolyCoefficient, assemble_load,
                  assemble_stiffness, prolong, residual_from_flux)
from .fields import ellipticity_bounds, point_box
from .frame import (FrameIndex, get_frame_constants, mesh_of, parent,
                    residual_indicators)
from .indices import ParamIndex, ZERO_INDEX
from .kernels import beta
from .mesh import node_set, overlay, uniform_mesh


# ---------------------------------------------------------------------------
# parameters


@dataclass
class SolverParams:
    """Adaptivity parameters; see `validate_params` for the admissible
    region.  c_stable is the (measured) stable-decomposition constant and
    cP the Galerkin-tolerance scaling constant (config-exposed)."""
    zeta: float = 0.05
    omega0: float = 0.25
    omega1: float = 0.28
    q: float = 0.03
    rho_rel: float = 0.1
    n_gal: int = 4
    cP: float = 1.0
    c_stable: float = 0.9
    strict_cbpsi: bool = False
    eta0: float | None = None
    Jhat: int | None = None      # override of the computed frame window
    max_iter: int = 30
    max_halvings: int = 40
    gal_max_iter: int = 2000


def cbpsi_constant(bounds, fc, strict=False):
    """The composite condition constant; the strict variant keeps the
    literal printed form (in which the operator bound cancels)."""
    if strict:
        return fc.C_psi ** 2 / fc.c_psi ** 2
    return fc.C_psi ** 2 * bounds.CB / (fc.c_psi ** 2 * bounds.cB)


def validate_params(params: SolverParams, bounds, fc):
    """Checks the admissibility inequalities; raises ValueError on the
    first violation, returns a log of all evaluated quantities."""
    z = params.zeta
    log = {
        "CBpsi_default": cbpsi_constant(bounds, fc, strict=False),
        "CBpsi_strict": cbpsi_constant(bounds, fc, strict=True),
    }
    CB_psi = log["CBpsi_strict" if params.strict_cbpsi else "CBpsi_default"]
    log["CBpsi_used"] = CB_psi
    if not 0 < (CB_psi + 2) * z < 1:
        raise ValueError(
            f"zeta inadmissible: (C_Bpsi+2) zeta = {(CB_psi + 2) * z:.4g} "
            f"not in (0, 1)")
    omega0_min = (CB_psi + 1) * z / (1 - z)
    log["omega0_min"] = omega0_min
    if params.omega0 <= omega0_min:
        raise ValueError(f"omega0 = {params.omega0} <= {omega0_min:.4g}")
    if not params.omega0 < params.omega1:
        raise ValueError("omega0 must be < omega1")
    omega1_cap = ((1 - 2 * z) * params.c_stable * math.sqrt(bounds.cB)
                  / (fc.C_psi * math.sqrt(bounds.CB)))
    log["omega1_cap"] = omega1_cap
    if not params.omega1 * (1 - z) + z < omega1_cap:
        raise ValueError(
            f"omega1 inadmissible: {params.omega1 * (1 - z) + z:.4g} >= "
            f"{omega1_cap:.4g}")
    if not 0 < params.q < z:
        raise ValueError("q must lie in (0, zeta)")
    # largest residual-solver slack for which the predicted reduction
    # factor stays below 1
    num = params.omega0 - (1 + params.omega0) * z
    log["gamma_max"] = num / ((1 + z) * fc.C_psi
                              * math.sqrt(bounds.CB * CB_psi))
    log["delta_at_gamma0"] = error_reduction_factor(params, bounds, fc, 0.0)
    return log


def error_reduction_factor(params: SolverParams, bounds, fc, gamma):
    """Predicted per-iteration energy-error reduction factor."""
    CB_psi = cbpsi_constant(bounds, fc, strict=params.strict_cbpsi)
    z = params.zeta
    num = params.omega0 - (1 + params.omega0) * z
    val = (1.0 - num ** 2 / CB_psi
           + gamma ** 2 * (1 + z) ** 2 * fc.C_psi ** 2 * bounds.CB)
    return math.sqrt(max(val, 0.0))


# ---------------------------------------------------------------------------
# residual estimation


@dataclass
class ResEstimate:
    rhat: dict                 # (nu, FrameIndex) -> coefficient
    residuals: dict            # nu -> ResidualFunctional
    eta: float
    b: float
    r_norm: float
    ops: int = 0
    halvings: int = 0


def frame_window(params: SolverParams, fc, xi):
    """Minimal level window so the dropped relative coefficient mass is
    below q, from the calibrated tail constant for xi's degrees."""
    if params.Jhat is not None:
        return params.Jhat
    C = fc.tail.get((xi.m1, xi.m2), max(fc.tail.values()))
    return max(fc.J0, math.ceil(math.log2(C / params.q)))


def res_estimate(u: GalerkinVector, f, scheme, bounds, fc,
                 params: SolverParams, eta, eps) -> ResEstimate:
    """Frame indicators of the residual f - B u with compressed application
    at tolerance eta / C_Psi; eta is halved until its share of the bound is
    dominated or the total bound drops below eps."""
    qfac = 1.0 + params.q / math.sqrt(1.0 - params.q ** 2)
    ops = 0
    for halving in range(params.max_halvings + 1):
        fluxes = {}
        if len(u):
            plan = plan_apply(u, eta / fc.C_psi, bounds.CB, scheme)
            g = execute_apply(plan, u, scheme)
            ops += g.ops
            fluxes = g.fluxes
        residuals = {}
        for nu in sorted(set(fluxes) | {ZERO_INDEX}):
            flux = fluxes.get(nu)
            fmode = f if nu == ZERO_INDEX else None
            if flux is None:
                mesh = f.mesh
            elif fmode is None:
                mesh = flux.mesh
            else:
                mesh = overlay(flux.mesh, f.mesh)
            residuals[nu] = residual_from_flux(fmode, flux, mesh)
        rhat = {}
        for nu, xi in residuals.items():
            J = frame_window(params, fc, xi)
            for lam, val in residual_indicators(xi, J).items():
                rhat[(nu, lam)] = val
        r_norm = math.sqrt(sum(v * v for v in rhat.values()))
        b = eta + qfac * r_norm
        if b <= eps or eta <= (params.zeta - params.q) / (
                1.0 + params.zeta) * r_norm:
            return ResEstimate(rhat, residuals, eta, b, r_norm, ops,
                               halving)
        eta *= 0.5
    raise RuntimeError(
        f"residual estimation did not settle after {params.max_halvings} "
        f"halvings: eta={eta:.3g}, last r_norm={r_norm:.3g}, b={b:.3g}, "
        f"#modes={len(residuals)}, #indicators={len(rhat)}")


# ---------------------------------------------------------------------------
# tree selection of (mode, frame index) pairs


def _mode_active(nu, *sets):
    return any(p[0] == nu for s in sets for p in s)


def _best_roots(rhat):
    """Per mode, the root-level frame index with the largest indicator
    (ties broken by node), for activating parent modes during closure."""
    best = {}
    for (m, lamr), v in rhat.items():
        if lamr.j == 0:
            key = (abs(v), tuple(lamr))
            if m not in best or key > best[m][0]:
                best[m] = (key, lamr)
    return {m: lamr for m, (key, lamr) in best.items()}


def _pair_closure(dim, pair, Lambda, active_modes, roots):
    """Ancestor closure of a candidate pair: spatial parents within the
    same mode, plus activation of a stochastic parent mode at a root-level
    frame index when none is active yet."""
    out = []
    stack = [pair]
    seen = set()
    seen_modes = set()
    while stack:
        nu, lam = stack.pop()
        if (nu, lam) in Lambda or (nu, lam) in seen:
            continue
        seen.add((nu, lam))
        seen_modes.add(nu)
        out.append((nu, lam))
        par = parent(dim, lam)
        if par is not None:
            stack.append((nu, par))
        if nu.entries:
            # deterministic parent mode: decrement the last (finest) label
            nu_parent = nu.add(nu.entries[-1][0], -1)
            if nu_parent not in active_modes and \
                    nu_parent not in seen_modes:
                root = roots.get(nu_parent,
                                 FrameIndex(0, node_set(dim, 0)[0]))
                stack.append((nu_parent, root))
    return out


def is_pair_tree(dim, Lambda):
    Lambda = set(Lambda)
    for nu, lam in Lambda:
        par = parent(dim, lam)
        if par is not None and (nu, par) not in Lambda:
            return False
        if nu.entries and not any(
                _mode_active(nu.add(lab, -1), Lambda)
                for lab, v in nu.entries):
            return False
    return True


def tree_approx(dim, current, rhat, omega0):
    """Tree-structured extension of `current` capturing at least an omega0
    fraction of the indicator mass, greedy best-first on the aggregated
    mass per closure node."""
    total = sum(v * v for v in rhat.values())
    Lambda = set(current)
    captured = sum(v * v for p, v in rhat.items() if p in Lambda)
    target = omega0 ** 2 * total
    if total == 0.0:
        return Lambda
    candidates = sorted((p for p in rhat if p not in Lambda),
                        key=lambda p: (-rhat[p] ** 2, p))
    roots = _best_roots(rhat)
    while captured < target * (1.0 - 1e-12):
        active_modes = {nu for nu, _ in Lambda}
        # capping the counted gain at the remaining quota keeps the greedy
        # quasi-minimal: once a single cheap closure suffices, a heavier
        # but larger one must not win on raw density
        needed = target - captured
        best = None
        for p in candidates:
            if p in Lambda:
                continue
            clo = _pair_closure(dim, p, Lambda, active_modes, roots)
            gain = sum(rhat.get(c, 0.0) ** 2 for c in clo)
            score = min(gain, needed) / len(clo)
            if best is None or score > best[0] * (1.0 + 1e-12):
                best = (score, gain, clo)
        if best is None:
            raise RuntimeError(
                "requested capture fraction unreachable: "
                f"captured {captured:.3g} of target {target:.3g}")
        Lambda.update(best[2])
        captured += best[1]
    return Lambda


def mesh_update(dim, Lambda):
    """Per-mode smallest conforming meshes carrying the selected frame
    indices."""
    per_nu = {}
    for nu, lam in Lambda:
        per_nu.setdefault(nu, set()).add(lam)
    return {nu: mesh_of(dim, lams) for nu, lams in sorted(per_nu.items())}


def total_cells(meshes):
    return sum(len(m) for m in meshes.values())


# ---------------------------------------------------------------------------
# Galerkin solve


def _assemble_block_system(meshes, f, scheme, n_gal):
    modes = sorted(meshes)
    idx = {nu: i for i, nu in enumerate(modes)}
    sizes = [len(meshes[nu].interior_vertices) for nu in modes]
    blocks = [[None] * len(modes) for _ in modes]
    for i, nu in enumerate(modes):
        coeffs = block_coefficient_polys(scheme, n_gal, nu,
                                         modes=set(modes))
        for nup, cf in coeffs.items():
            j = idx.get(nup)
            if j is None:
                continue
            blocks[j][i] = assemble_stiffness(cf, meshes[nu], meshes[nup])
    A = sp.bmat(blocks, format="csr")
    b = np.zeros(sum(sizes))
    if ZERO_INDEX in idx:
        i0 = idx[ZERO_INDEX]
        off = sum(sizes[:i0])
        b[off:off + sizes[i0]] = assemble_load(f, meshes[ZERO_INDEX])
    return modes, sizes, A, b


def galerkin_solve(meshes, u_init: GalerkinVector, f, scheme, n_gal, tol,
                   max_iter=2000) -> GalerkinVector:
    """Block-PCG solve of the compressed Galerkin system on the given mesh
    family; the preconditioner is the factorized block diagonal.  Stops
    when the preconditioned residual norm (the discrete dual-norm estimate)
    drops below tol."""
    modes, sizes, A, b = _assemble_block_system(meshes, f, scheme, n_gal)
    offs = np.concatenate([[0], np.cumsum(sizes)])
    x = np.zeros(offs[-1])
    for i, nu in enumerate(modes):
        if nu in u_init:
            x[offs[i]:offs[i + 1]] = prolong(u_init[nu], meshes[nu]).nodal
    lus = [spla.splu(sp.csc_matrix(A[offs[i]:offs[i + 1],
                                     offs[i]:offs[i + 1]]))
           for i in range(len(modes))]

    def msolve(r):
        z = np.empty_like(r)
        for i in range(len(modes)):
            z[offs[i]:offs[i + 1]] = lus[i].solve(r[offs[i]:offs[i + 1]])
        return z

    r = b - A @ x
    z = msolve(r)
    rz = float(r @ z)
    best, best_it = math.sqrt(max(rz, 0.0)), 0
    if best <= tol:
        return _vector_from_flat(modes, meshes, offs, x)
    p = z.copy()
    for it in range(1, max_iter + 1):
        Ap = A @ p
        pAp = float(p @ Ap)
        if pAp <= 0:
            raise RuntimeError(
                f"Galerkin system not positive definite (p.Ap = {pAp:.3g}); "
                f"compression level n = {n_gal} too aggressive")
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        z = msolve(r)
        rz_new = float(r @ z)
        nrm = math.sqrt(max(rz_new, 0.0))
        if nrm <= tol:
            return _vector_from_flat(modes, meshes, offs, x)
        if nrm < best * (1.0 - 1e-3):
            best, best_it = nrm, it
        elif it - best_it > 100:
            raise RuntimeError(
                f"PCG stagnation: residual {nrm:.3g} stuck near {best:.3g} "
                f"for 100 iterations (tol {tol:.3g}, {offs[-1]} unknowns, "
                f"{len(modes)} modes)")
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise RuntimeError(
        f"PCG did not reach tol {tol:.3g} within {max_iter} iterations "
        f"(last {nrm:.3g}, {offs[-1]} unknowns)")


def _vector_from_flat(modes, meshes, offs, x):
    return GalerkinVector({nu: P1Function(meshes[nu],
                                          x[offs[i]:offs[i + 1]].copy())
                           for i, nu in enumerate(modes)})


# ---------------------------------------------------------------------------
# reference solutions (for error bookkeeping in benchmarks)


def _enumerate_modes(labels, degree):
    out = [ZERO_INDEX]
    frontier = [ZERO_INDEX]
    for _ in range(degree):
        nxt = []
        for nu in frontier:
            last = nu.entries[-1][0] if nu.entries else None
            for lab in labels:
                if last is not None and (lab.qlevel, lab.level,
                                         lab.position) < (last.qlevel,
                                                          last.level,
                                                          last.position):
                    continue
                nxt.append(nu.add(lab, +1))
        frontier = sorted(set(nxt))
        out.extend(frontier)
    return sorted(set(out))


class ReferenceSolution:
    """Dense-mode, uniform-mesh Galerkin solution of the affine problem,
    with a tensor-structured matrix application for error evaluation."""

    def __init__(self, field, level, degree, f=None, tol=1e-9,
                 max_iter=4000):
        if field.dim != 1:
            raise NotImplementedError("reference solves are 1D only")
        self.field = field
        self.mesh = uniform_mesh(1, level)
        if f is None:
            f = PiecewisePolyCoefficient.constant(uniform_mesh(1, 0), 1.0)
        labels = sorted(th.label for th in field.all_thetas())
        self.modes = _enumerate_modes(labels, degree)
        self.index = {nu: i for i, nu in enumerate(self.modes)}
        nd = len(self.mesh.interior_vertices)
        self.ndofs = nd
        self.S0 = assemble_stiffness(
            PiecewisePolyCoefficient.constant(self.mesh, field.theta0),
            self.mesh)
        bm = uniform_mesh(1, _mesh_level_for_boxes(
            1, field.finest_raw_level()))
        self.S = {}
        self.shifts = {}
        raw = field.finest_raw_level()
        for th in field.all_thetas():
            polys = {}
            for eid in bm.leaves:
                center = _cell_center_1d(eid)
                box = point_box(center, 0.0, raw, 1)
                p = _theta_poly_on_box(th, box, 1)
                polys[eid] = p if p is not None else np.zeros(1)
            cf = PiecewisePolyCoefficient(bm, polys)
            self.S[th.label] = assemble_stiffness(cf, self.mesh)
            ups, dns, wts = [], [], []
            for i, nu in enumerate(self.modes):
                nup = nu.add(th.label, +1)
                j = self.index.get(nup)
                if j is not None:
                    ups.append(i)
                    dns.append(j)
                    wts.append(math.sqrt(beta(nu.get(th.label) + 1)))
            self.shifts[th.label] = (np.array(ups, dtype=int),
                                     np.array(dns, dtype=int),
                                     np.array(wts))
        self.lu0 = spla.splu(sp.csc_matrix(self.S0))
        b = np.zeros((len(self.modes), nd))
        b[self.index[ZERO_INDEX]] = assemble_load(f, self.mesh)
        self.x = self._pcg(b, tol, max_iter)

    def matvec(self, X):
        Y = (self.S0 @ X.T).T
        for lab, (ups, dns, wts) in self.shifts.items():
            SX = (self.S[lab] @ X.T).T
            np.add.at(Y, ups, wts[:, None] * SX[dns])
            np.add.at(Y, dns, wts[:, None] * SX[ups])
        return Y

    def _pcg(self, b, tol, max_iter):
        X = np.zeros_like(b)
        R = b - self.matvec(X)
        Z = self.lu0.solve(R.T).T
        rz = float((R * Z).sum())
        if math.sqrt(max(rz, 0.0)) <= tol:
            return X
        P = Z.copy()
        for it in range(max_iter):
            AP = self.matvec(P)
            alpha = rz / float((P * AP).sum())
            X += alpha * P
            R -= alpha * AP
            Z = self.lu0.solve(R.T).T
            rz_new = float((R * Z).sum())
            if math.sqrt(max(rz_new, 0.0)) <= tol:
                return X
            P = Z + (rz_new / rz) * P
            rz = rz_new
        raise RuntimeError(f"reference PCG stalled at {math.sqrt(rz):.3g}")

    def embed(self, u: GalerkinVector):
        X = np.zeros_like(self.x)
        extra = []
        for nu in u.support():
            i = self.index.get(nu)
            if i is None:
                extra.append(nu)
                continue
            X[i] = prolong(u[nu], self.mesh).nodal
        return X, extra

    def energy_error(self, u: GalerkinVector):
        """Energy norm (of the truncated affine operator) of the
        difference to the reference solution."""
        X, extra = self.embed(u)
        E = self.x - X
        err2 = float((E * self.matvec(E)).sum())
        for nu in extra:
            w = prolong(u[nu], self.mesh).nodal
            err2 += float(w @ (self.S0 @ w))
        return math.sqrt(max(err2, 0.0))

    def energy_norm(self):
        return math.sqrt(float((self.x * self.matvec(self.x)).sum()))


def _cell_center_1d(eid):
    root, bits = eid
    lo, hi = root * 0.5, (root + 1) * 0.5
    for b in bits:
        mid = 0.5 * (lo + hi)
        lo, hi = (lo, mid) if b == 0 else (mid, hi)
    return 0.5 * (lo + hi)


class GenericReference:
    """Reference solve through the generic block assembly (any scheme),
    for moderate mode counts."""

    def __init__(self, field, scheme, level, degree, f=None, n_ref=None,
                 tol=1e-9):
        self.mesh = uniform_mesh(field.dim, level)
        if f is None:
            f = PiecewisePolyCoefficient.constant(
                uniform_mesh(field.dim, 0), 1.0)
        labels = sorted(th.label for th in field.all_thetas())
        self.modes = _enumerate_modes(labels, degree)
        self.index = {nu: i for i, nu in enumerate(self.modes)}
        meshes = {nu: self.mesh for nu in self.modes}
        n = n_ref if n_ref is not None else getattr(scheme, "max_n", 8)
        _, sizes, self.A, b = _assemble_block_system(meshes, f, scheme, n)
        self.sizes = sizes
        self.offs = np.concatenate([[0], np.cumsum(sizes)])
        self.x = spla.spsolve(sp.csc_matrix(self.A), b)

    def embed(self, u: GalerkinVector):
        X = np.zeros(self.offs[-1])
        extra = []
        for nu in u.support():
            i = self.index.get(nu)
            if i is None:
                extra.append(nu)
                continue
            X[self.offs[i]:self.offs[i + 1]] = prolong(u[nu],
                                                       self.mesh).nodal
        return X, extra

    def energy_error(self, u: GalerkinVector):
        X, extra = self.embed(u)
        if extra:
            raise ValueError(f"modes outside the reference set: {extra}")
        e = self.x - X
        return math.sqrt(max(float(e @ (self.A @ e)), 0.0))

    def energy_norm(self):
        return math.sqrt(float(self.x @ (self.A @ self.x)))


# ---------------------------------------------------------------------------
# driver


def load_dual_norm(f, dim, level=None):
    """||f||_{V'} via a Riesz solve on a fine uniform mesh."""
    if level is None:
        level = 9 if dim == 1 else 5
    mesh = uniform_mesh(dim, level)
    A = assemble_stiffness(PiecewisePolyCoefficient.constant(mesh, 1.0),
                           mesh)
    b = assemble_load(f, mesh)
    z = spla.spsolve(sp.csc_matrix(A), b)
    return math.sqrt(max(float(b @ z), 0.0))


def build_scheme(field, param):
    if param.kind == "affine":
        return build_scheme_affine(field, param)
    return build_scheme_nonlinear(field, param)


def adaptive_loop(field, param, params: SolverParams, eps, f=None,
                  reference=None, scheme=None, log=None):
    """Iterates residual estimation / tree selection / mesh generation /
    Galerkin solve until the computable residual bound drops below eps.
    Returns (u, history, validation_log)."""
    dim = field.dim
    bounds = ellipticity_bounds(field, param)
    fc = get_frame_constants(dim)
    vlog = validate_params(params, bounds, fc)
    if scheme is None:
        scheme = build_scheme(field, param)
    if f is None:
        f = PiecewisePolyCoefficient.constant(uniform_mesh(dim, 0), 1.0)
    r_init = fc.C_psi * load_dual_norm(f, dim)
    vlog["r_init"] = r_init
    u = GalerkinVector()
    Lambda = set()
    meshes = {}
    eta = params.eta0 if params.eta0 is not None else params.zeta * r_init
    history = []
    for k in range(params.max_iter):
        res = res_estimate(u, f, scheme, bounds, fc, params, eta, eps)
        row = {
            "iter": k,
            "eta": res.eta,
            "b": res.b,
            "r_norm": res.r_norm,
            "N_T": total_cells(meshes),
            "num_modes": len(u) if len(u) else len(meshes),
            "num_pairs": len(Lambda),
            "ops_estimate": res.ops,
            "halvings": res.halvings,
        }
        if reference is not None:
            row["err_ref"] = reference.energy_error(u)
        history.append(row)
        if log is not None:
            log(row)
        if res.b <= eps:
            break
        Lambda = tree_approx(dim, Lambda, res.rhat, params.omega0)
        meshes = mesh_update(dim, Lambda)
        tol = (params.rho_rel / (math.sqrt(params.cP) * fc.c_psi)
               * res.r_norm)
        u = galerkin_solve(meshes, u, f, scheme, params.n_gal, tol,
                           max_iter=params.gal_max_iter)
        eta = res.eta
    return u, history, vlog
