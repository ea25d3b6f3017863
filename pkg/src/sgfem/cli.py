"""Command-line front end: config parsing, experiment runs, CSV/SVG output.

Config files are plain text with [section] headers and key = value lines;
see the README for the recognized keys.  Exit codes: 0 success, 1 a run
failed (solver error, empty history, failed verification), 2 the input was
invalid (bad config, unknown suite).
"""
from __future__ import annotations

import argparse
import math
import os
import sys

import numpy as np

from .fields import (Parametrization, build_haar_multilevel,
                     build_hat_multilevel, ellipticity_bounds)
from .frame import get_frame_constants
from .indices import ZERO_INDEX
from .solver import (GenericReference, ReferenceSolution, SolverParams,
                     adaptive_loop, build_scheme)

_SOLVER_FLOATS = ("zeta", "omega0", "omega1", "q", "rho_rel", "cP",
                  "c_stable", "eta0")
_SOLVER_INTS = ("n_gal", "Jhat", "max_iter", "max_halvings", "gal_max_iter")


class ConfigError(Exception):
    pass


def parse_config(path):
    """Flat key = value sections; '#' starts a comment."""
    sections = {}
    current = None
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    for ln, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line or current is None:
            raise ConfigError(f"{path}:{ln}: expected 'key = value' inside "
                              f"a [section], got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key in sections[current]:
            raise ConfigError(f"{path}:{ln}: duplicate key {key!r}")
        sections[current][key] = val
    return sections


def _get(cfg, section, key, cast, default=None, required=False):
    sec = cfg.get(section, {})
    if key not in sec:
        if required:
            raise ConfigError(f"missing [{section}] {key}")
        return default
    try:
        if cast is bool:
            return sec[key].lower() in ("1", "true", "yes", "on")
        return cast(sec[key])
    except ValueError:
        raise ConfigError(f"[{section}] {key} = {sec[key]!r}: not a "
                          f"{cast.__name__}")


def build_problem(cfg):
    """(field, param, solver params, eps, seed) from a parsed config."""
    dim = _get(cfg, "problem", "dim", int, 1)
    kind = _get(cfg, "problem", "kind", str, "affine")
    basis = _get(cfg, "problem", "basis", str, "haar")
    alpha = _get(cfg, "problem", "alpha", float, 1.0)
    max_level = _get(cfg, "problem", "max_level", int, 2)
    amplitude = _get(cfg, "problem", "amplitude", float, required=True)
    theta0 = _get(cfg, "problem", "theta0", float, 1.0)
    seed = _get(cfg, "run", "seed", int, None)
    if kind not in ("affine", "logaffine"):
        raise ConfigError(f"[problem] kind = {kind!r}: expected affine or "
                          f"logaffine")
    try:
        if basis == "haar":
            field = build_haar_multilevel(dim, alpha, max_level, amplitude,
                                          theta0=theta0, kind=kind,
                                          seed=seed)
        elif basis == "hat":
            if dim != 1:
                raise ConfigError("[problem] basis = hat is 1D only")
            field = build_hat_multilevel(alpha, max_level, amplitude,
                                         theta0=theta0, kind=kind)
        else:
            raise ConfigError(f"[problem] basis = {basis!r}: expected haar "
                              f"or hat")
    except ValueError as exc:
        raise ConfigError(f"field construction failed: {exc}")
    param = Parametrization.affine() if kind == "affine" \
        else Parametrization.logaffine()
    kwargs = {}
    for key in _SOLVER_FLOATS:
        val = _get(cfg, "solver", key, float)
        if val is not None:
            kwargs[key] = val
    for key in _SOLVER_INTS:
        val = _get(cfg, "solver", key, int)
        if val is not None:
            kwargs[key] = val
    kwargs["strict_cbpsi"] = _get(cfg, "solver", "strict_cbpsi", bool,
                                  False)
    params = SolverParams(**kwargs)
    eps = _get(cfg, "solver", "eps", float, required=True)
    if eps <= 0:
        raise ConfigError("[solver] eps must be positive")
    return field, param, params, eps, seed


def _reference_from(cfg, field, param, scheme):
    which = _get(cfg, "run", "reference", str, "none")
    if which == "none":
        return None
    level = _get(cfg, "run", "ref_level", int, 7)
    degree = _get(cfg, "run", "ref_degree", int, 4)
    if which == "tensor":
        if param.kind != "affine":
            raise ConfigError("[run] reference = tensor requires an "
                              "affine problem")
        return ReferenceSolution(field, level, degree)
    if which == "generic":
        return GenericReference(field, scheme, level, degree)
    raise ConfigError(f"[run] reference = {which!r}: expected none, "
                      f"tensor or generic")


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.12g}"
    return str(x)


_HISTORY_COLS = ("iter", "eta", "b", "r_norm", "N_T", "num_modes",
                 "ops_estimate")


def write_history_csv(path, history):
    cols = list(_HISTORY_COLS)
    if history and "err_ref" in history[0]:
        cols.append("err_ref")
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in history:
            fh.write(",".join(_fmt(row[c]) for c in cols) + "\n")


def write_solution(path, u):
    with open(path, "w") as fh:
        fh.write(f"# modes = {len(u)}\n")
        for nu in u.support():
            v = u[nu]
            fh.write(f"mode {nu}\n")
            fh.write(f"  cells = {len(v.mesh)}\n")
            fh.write("  nodal = " + " ".join(_fmt(float(x))
                                             for x in v.nodal) + "\n")


def num_threads():
    try:
        return max(1, int(os.environ.get("SGFEM_THREADS", "1")))
    except ValueError:
        return 1


def cmd_solve(args):
    try:
        cfg = parse_config(args.config)
        field, param, params, eps, seed = build_problem(cfg)
        scheme = build_scheme(field, param)
        reference = _reference_from(cfg, field, param, scheme)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    try:
        u, history, vlog = adaptive_loop(field, param, params, eps,
                                         reference=reference,
                                         scheme=scheme)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1
    write_history_csv(os.path.join(out, "history.csv"), history)
    write_solution(os.path.join(out, "solution.txt"), u)
    final_b = history[-1]["b"]
    print(f"iterations = {len(history)}  final b = {_fmt(final_b)}  "
          f"eps = {_fmt(eps)}  threads = {num_threads()}")
    return 0 if final_b <= eps else 1


# ---------------------------------------------------------------------------
# verification suites


def _suite_recursion(report):
    from .kernels import triple_product
    from .oracles import _legendre_on
    nodes, weights = np.polynomial.legendre.leggauss(50)
    weights = weights / 2.0
    try:
        from scipy.special import eval_chebyt
    except ImportError:  # pragma: no cover
        raise RuntimeError("scipy required for the recursion suite")
    worst = 0.0
    for z in (0.0, 0.3, 0.5, -0.8, 1.0):
        for k in range(0, 6):
            for l in range(0, 7):
                for lp in range(0, 7):
                    got = triple_product(z, k, l, lp)
                    ref = float(np.sum(
                        weights * eval_chebyt(k, z * nodes)
                        * _legendre_on(l, nodes)
                        * _legendre_on(lp, nodes)))
                    worst = max(worst, abs(got - ref))
                    if abs(l - lp) > k and got != 0.0:
                        raise RuntimeError(
                            f"orthogonality cutoff violated at "
                            f"k={k} l={l} l'={lp}")
    report["recursion_max_abs_error"] = (
        worst, "tridiagonal Chebyshev recursion vs 50-point "
               "Gauss-Legendre quadrature")
    if worst > 1e-10:
        raise RuntimeError(f"recursion mismatch {worst:.3g} > 1e-10")


def _suite_stechkin(report):
    from .oracles import stechkin_check
    rng = np.random.default_rng(20240801)
    for i in range(1000):
        n = int(rng.integers(3, 30))
        a = np.sort(rng.random(n))[::-1]
        b = rng.random(n) + 1e-3
        p = float(rng.uniform(0.05, 0.95))
        k = int(rng.integers(1, n))
        if not stechkin_check(a, b, p, k):
            raise RuntimeError(f"tail inequality failed on instance {i}")
    report["stechkin_instances"] = (1000, "random nonincreasing sequences")


def _suite_summability(report):
    from .oracles import summability_check
    cases = [dict(alpha=1.0, rho=2.0, p=0.75, d=1),
             dict(alpha=1.0, rho=2.0, p=0.9, d=2),
             dict(alpha=2.0, rho=1.5, p=0.8, d=1),
             dict(alpha=1.0, rho=2.0, p=0.9, d=1, t=2),
             dict(alpha=2.0, rho=1.5, p=0.8, da=1, db=1, t=1)]
    margin = math.inf
    for case in cases:
        lhs, rhs = summability_check(**case)
        if lhs > rhs:
            raise RuntimeError(f"summability bound violated for {case}")
        margin = min(margin, rhs / lhs)
    report["summability_cases"] = (len(cases),
                                   "truncated sums vs closed-form bounds")
    report["summability_min_margin"] = (margin, "bound / truncated sum")


def _suite_interaction(report):
    from .compress import build_scheme_affine
    from .fields import build_haar_multilevel as haar
    from .oracles import quad_interaction_oracle
    from .kernels import beta
    field = haar(1, 1.0, 1, 0.25)
    par = Parametrization.affine()
    labs = sorted(th.label for th in field.all_thetas())
    worst = 0.0
    for lab in labs:
        th = field.theta_by_label(lab)
        for k in range(4):
            nu = ZERO_INDEX.add(lab, k)
            got = quad_interaction_oracle(field, par, nu, nu.add(lab, 1),
                                          [0.3, 0.8])
            want = math.sqrt(beta(k + 1)) * np.array([th(0.3), th(0.8)])
            worst = max(worst, float(np.abs(got - want).max()))
    report["interaction_max_abs_error"] = (
        worst, "quadrature oracle vs three-term recursion shift")
    if worst > 1e-10:
        raise RuntimeError(f"interaction mismatch {worst:.3g}")


def _suite_constants(report):
    fc = get_frame_constants(1)
    report["c_psi_dim1"] = (fc.c_psi, "calibrated frame lower constant")
    report["C_psi_dim1"] = (fc.C_psi, "calibrated frame upper constant")
    report["frame_J0_dim1"] = (fc.J0, "calibrated window offset")
    field = build_haar_multilevel(1, 1.0, 2, 0.15)
    bounds = ellipticity_bounds(field, Parametrization.affine())
    report["benchmark_cB"] = (bounds.cB, "benchmark field ellipticity")
    report["benchmark_CB"] = (bounds.CB, "benchmark field continuity")


_SUITES = {
    "recursion": _suite_recursion,
    "stechkin": _suite_stechkin,
    "summability": _suite_summability,
    "interaction": _suite_interaction,
    "constants": _suite_constants,
}


def write_ledger(path, report):
    with open(path, "w") as fh:
        fh.write("# verification constants ledger\n")
        for key in sorted(report):
            val, why = report[key]
            fh.write(f"# {why}\n{key} = {_fmt(val)}\n")


def cmd_verify(args):
    names = sorted(_SUITES) if args.suite == "all" else [args.suite]
    unknown = [n for n in names if n not in _SUITES]
    if unknown:
        print(f"unknown suite {unknown[0]!r}; available: "
              f"{', '.join(sorted(_SUITES))} or all", file=sys.stderr)
        return 2
    report = {}
    for name in names:
        try:
            _SUITES[name](report)
        except RuntimeError as exc:
            print(f"suite {name} FAILED: {exc}", file=sys.stderr)
            return 1
        print(f"suite {name}: ok")
    if args.ledger:
        write_ledger(args.ledger, report)
    return 0


# ---------------------------------------------------------------------------
# convergence-rate runs


def _svg_polyline(path, series, title):
    """Minimal log-log polyline chart; series is a list of
    (name, xs, ys)."""
    W, H, PAD = 640, 420, 50
    pts = [(math.log(x), math.log(y)) for _, xs, ys in series
           for x, y in zip(xs, ys) if x > 0 and y > 0]
    if not pts:
        raise ValueError("nothing to plot")
    xs = [p[0] for p in pts]
    ys = [p[1] for p in pts]
    x0, x1 = min(xs), max(xs) or 1.0
    y0, y1 = min(ys), max(ys)
    sx = (W - 2 * PAD) / max(x1 - x0, 1e-12)
    sy = (H - 2 * PAD) / max(y1 - y0, 1e-12)
    colors = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" '
           f'height="{H}">',
           f'<text x="{W // 2}" y="20" text-anchor="middle">{title}'
           f'</text>',
           f'<rect x="{PAD}" y="{PAD}" width="{W - 2 * PAD}" '
           f'height="{H - 2 * PAD}" fill="none" stroke="black"/>']
    for i, (name, sxs, sys_) in enumerate(series):
        coords = " ".join(
            f"{PAD + (math.log(x) - x0) * sx:.1f},"
            f"{H - PAD - (math.log(y) - y0) * sy:.1f}"
            for x, y in zip(sxs, sys_) if x > 0 and y > 0)
        col = colors[i % len(colors)]
        out.append(f'<polyline points="{coords}" fill="none" '
                   f'stroke="{col}" stroke-width="1.5"/>')
        out.append(f'<text x="{PAD + 8}" y="{PAD + 18 + 16 * i}" '
                   f'fill="{col}">{name}</text>')
    out.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(out) + "\n")


def cmd_rates(args):
    from .oracles import rate_fit
    try:
        cfg = parse_config(args.config)
        field, param, params, eps, seed = build_problem(cfg)
        scheme = build_scheme(field, param)
        reference = _reference_from(cfg, field, param, scheme)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    out = args.out or "."
    os.makedirs(out, exist_ok=True)
    try:
        u, history, vlog = adaptive_loop(field, param, params, eps,
                                         reference=reference,
                                         scheme=scheme)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"solver error: {exc}", file=sys.stderr)
        return 1
    errcol = "err_ref" if reference is not None else "b"
    rows = [r for r in history if r["N_T"] > 0 and r[errcol] > 0]
    if len(rows) < 3:
        print("history too short for a rate fit (need >= 3 refined "
              "iterations)", file=sys.stderr)
        return 1
    xs = [r["N_T"] for r in rows]
    ys = [r[errcol] for r in rows]
    slope, hw = rate_fit(xs, ys)
    # compression-error decay of the scheme itself
    ns = list(range(0, 7))
    comp = [scheme.bound_error(n) for n in ns]
    with open(os.path.join(out, "rates.csv"), "w") as fh:
        fh.write(f"# error column = {errcol}; fitted slope = "
                 f"{_fmt(slope)} +- {_fmt(hw)}\n")
        fh.write("N_T,error\n")
        for x, y in zip(xs, ys):
            fh.write(f"{_fmt(x)},{_fmt(y)}\n")
        fh.write("n,compression_error\n")
        for n, c in zip(ns, comp):
            fh.write(f"{n},{_fmt(c)}\n")
    series = [("error vs cells", xs, ys)]
    pos = [(2.0 ** n, c) for n, c in zip(ns, comp) if c > 0]
    if pos:
        series.append(("operator compression", [p[0] for p in pos],
                       [p[1] for p in pos]))
    _svg_polyline(os.path.join(out, "rates.svg"), series,
                  "adaptive error decay (log-log)")
    print(f"fitted slope = {_fmt(slope)} +- {_fmt(hw)} over {len(xs)} "
          f"points")
    return 0


def main(argv=None):
    ap = argparse.ArgumentParser(
        prog="sgfem",
        description="Adaptive stochastic Galerkin solver for parametric "
                    "diffusion problems")
    sub = ap.add_subparsers(dest="cmd", required=True)
    ps = sub.add_parser("solve", help="run the adaptive loop")
    ps.add_argument("--config", required=True)
    ps.add_argument("--out", default=None)
    ps.set_defaults(func=cmd_solve)
    pv = sub.add_parser("verify", help="run a verification suite")
    pv.add_argument("--suite", required=True)
    pv.add_argument("--ledger", default=None,
                    help="write measured constants to this file")
    pv.set_defaults(func=cmd_verify)
    pr = sub.add_parser("rates", help="convergence-rate study")
    pr.add_argument("--config", required=True)
    pr.add_argument("--out", default=None)
    pr.set_defaults(func=cmd_rates)
    args = ap.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
