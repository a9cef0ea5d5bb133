"""Command line interface: ``epsrecon <command> --config FILE [--set section.key=value ...]``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ConfigError, SolverError, UsageError
from ..estimators import Triple, estimate_all
from ..objective import CutoffFunction, ReducedProblem, RegularizationConfig, project_admissible
from ..pde import ObservationData, adjoint_solve, direct_solve
from ..spaces import ScalarSpace, interpolate
from . import io
from .adaptive import build_problem, reconstruct_adaptive, reference_field, target_from_config
from .config import parse_config
from .synthetic import relative_l2_error

GRAD_CHECK_TOL = 1e-3


def _coefficient(cfg, problem, which):
    """The coefficient a single-level command works with."""
    eps0 = reference_field(problem.mesh, cfg)
    if which == "reference":
        return eps0
    if problem.target is None:
        raise ConfigError("this choice of coefficient needs target.center")
    target = interpolate(problem.target, ScalarSpace(problem.mesh, cfg["domain.eps_degree"]))
    if which == "blend":
        target = target.copy(0.5 * (target.values + eps0.values))
    return project_admissible(target, cfg["regularization.eps_max"])


def _setup(cfg, which):
    problem = build_problem(cfg)
    mesh, grid = problem.mesh, problem.grid
    G = problem.master.resample(mesh, grid)
    P = problem.source.neumann(mesh, grid)
    reg = RegularizationConfig(cfg["regularization.alpha"], reference_field(mesh, cfg))
    eps = _coefficient(cfg, problem, which)
    return problem, G, P, reg, eps


def forward_cmd(cfg, out, which):
    problem, _, P, _, eps = _setup(cfg, which)
    E = direct_solve(eps, P)
    files, index = io.write_vtk_series(out / "E", "E", problem.mesh, problem.grid, E.values, "E")
    trace = io.write_trace_csv(out / "trace_E.csv", ObservationData.from_field(E))
    print(f"forward: {len(files)} VTK files, trace {trace}")
    return 0


def adjoint_cmd(cfg, out, which):
    problem, G, P, _, eps = _setup(cfg, which)
    E = direct_solve(eps, P)
    lam = adjoint_solve(eps, E, G, problem.cutoff)
    files, _ = io.write_vtk_series(out / "lambda", "lambda", problem.mesh, problem.grid, lam.values, "lambda")
    print(f"adjoint: {len(files)} VTK files, max |lambda| = {np.abs(lam.values).max():.6e}")
    return 0


@dataclass
class GradientCheckRow:
    direction: int
    adjoint: float
    finite_difference: float
    rel_error: float
    degenerate: bool


def gradient_check(prob: ReducedProblem, eps, count=10, s=1e-4, seed=0):
    """Adjoint directional derivatives against central differences of the reduced functional.

    Directions are random on the free (non-collar) nodes. A pair is
    "degenerate" at a minimum along ``d``: ``F`` rises on both sides, so the
    central difference is bounded by the second difference
    ``c = F(eps + s d) + F(eps - s d) - 2 F(eps)``, and the first-order change
    ``s |g . d|`` predicted by the adjoint is below ``c / 2`` as well. Pairs
    below roundoff of ``F`` also count as degenerate. Generic points never
    qualify, since there ``F`` decreases on one side.
    """
    rng = np.random.default_rng(seed)
    F, _, _, E = prob.state(eps)
    g, _ = prob.gradient(eps, E)
    free = ~eps.collar
    floor = 1e-10 * max(abs(F), 1e-300)
    rows = []
    for i in range(count):
        d = np.zeros_like(eps.values)
        d[free] = rng.standard_normal(free.sum())
        adj = float(g @ d)
        fp = prob.value(project_admissible(eps.copy(eps.values + s * d), eps.eps_max, eps.collar))
        fm = prob.value(project_admissible(eps.copy(eps.values - s * d), eps.eps_max, eps.collar))
        fd = (fp - fm) / (2 * s)
        curvature = abs(fp + fm - 2 * F)
        stationary = curvature > 0 and abs(fp - fm) <= curvature and 2 * s * abs(adj) <= curvature
        degenerate = stationary or (abs(fd) <= floor / s and abs(adj) <= floor / s)
        rel = 0.0 if degenerate else abs(adj - fd) / max(abs(fd), 1e-300)
        rows.append(GradientCheckRow(i, adj, fd, rel, degenerate))
    return rows


def gradient_check_cmd(cfg, out, which, count, step, seed=0):
    _, G, P, reg, eps = _setup(cfg, which)
    prob = ReducedProblem(G, P, reg, CutoffFunction(cfg["time.T"], cfg.delta), cfg["regularization.eps_max"])
    rows = gradient_check(prob, eps, count, step, seed)
    worst = 0.0
    for r in rows:
        tag = "degenerate pass" if r.degenerate else ("ok" if r.rel_error <= GRAD_CHECK_TOL else "FAIL")
        print(f"direction {r.direction:3d}  adjoint {r.adjoint: .6e}  fd {r.finite_difference: .6e}  "
              f"rel {r.rel_error:.3e}  {tag}")
        worst = max(worst, r.rel_error)
    io.write_csv(out / "gradient_check.csv", ["direction", "adjoint", "fd", "rel_error", "degenerate"],
                 [[r.direction, r.adjoint, r.finite_difference, r.rel_error, int(r.degenerate)] for r in rows])
    print(f"worst relative error {worst:.3e} (limit {GRAD_CHECK_TOL:g})")
    return 0 if worst <= GRAD_CHECK_TOL else 1


def estimate_cmd(cfg, out, which):
    problem, G, P, reg, eps = _setup(cfg, which)
    E = direct_solve(eps, P)
    lam = adjoint_solve(eps, E, G, problem.cutoff)
    est = estimate_all(Triple(eps, E, lam), G, P, problem.cutoff, reg)
    b = est.bounds
    for name in ("lagrangian_bound", "coefficient_bound", "tikhonov_bound", "c_eps", "eta", "R_eps_norm"):
        print(f"{name:18s} {getattr(b, name):.6e}")
    cell = {"indicator": est.indicators.values, **est.residuals.cell_magnitudes(problem.mesh, problem.grid)}
    io.write_vtk(out / "estimate.vtk", problem.mesh, {"eps": eps.vertex_values()}, cell)
    return 0


def reconstruct_cmd(cfg, out):
    state = reconstruct_adaptive(cfg, out_dir=out)
    for h in state.history:
        print(f"cycle {h['cycle']}: cells {h['n_cells']}, F {h['F']:.6e}, "
              f"indicator {h['lagrangian_bound']:.6e}, status {h['status']}")
    target = target_from_config(cfg)
    if target is not None:
        print(f"relative L2 error against the target: {relative_l2_error(state.eps, target):.6e}")
    return 0 if state.status == "ok" else 2


def synthesize_cmd(cfg, out):
    problem = build_problem(cfg)
    G = problem.master.resample(problem.mesh, problem.grid)
    path = io.write_trace_csv(out / "observations.csv", G)
    print(f"observations written to {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="epsrecon", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_, coefficient=False):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True)
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", default=None, help="output directory (default from config)")
        if coefficient:
            p.add_argument("--at", choices=("reference", "target", "blend"), default="blend",
                           help="coefficient to evaluate at")
        return p

    add("forward", "solve the direct problem", True)
    add("adjoint", "solve the direct and adjoint problems", True)
    g = add("grad-check", "compare adjoint and finite-difference derivatives", True)
    g.add_argument("--directions", type=int, default=10)
    g.add_argument("--step", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    add("estimate", "evaluate the error estimators", True)
    add("reconstruct", "run the adaptive reconstruction")
    add("synthesize", "write synthetic observations")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = parse_config(args.config, args.set)
        out = Path(args.out or cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.resolved").write_text(cfg.dump(), encoding="utf-8")
        cmd = args.command
        if cmd == "forward":
            return forward_cmd(cfg, out, args.at)
        if cmd == "adjoint":
            return adjoint_cmd(cfg, out, args.at)
        if cmd == "grad-check":
            return gradient_check_cmd(cfg, out, args.at, args.directions, args.step, args.seed)
        if cmd == "estimate":
            return estimate_cmd(cfg, out, args.at)
        if cmd == "reconstruct":
            return reconstruct_cmd(cfg, out)
        return synthesize_cmd(cfg, out)
    except (ConfigError, UsageError, SolverError, OSError) as exc:
        print(f"epsrecon: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
