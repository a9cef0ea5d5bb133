"""Adaptive reconstruction loop and state export."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..estimators import ErrorBounds, Estimate, IndicatorField, Triple, estimate_all, mark_cells
from ..mesh import SimplicialMesh, TimeGrid, build_box_mesh, make_time_grid, refine_marked, stable_time_step
from ..objective import (
    CutoffFunction,
    OptimizerOptions,
    PermittivityField,
    RegularizationConfig,
    minimize,
    project_admissible,
)
from ..pde import ObservationData
from ..spaces import ScalarSpace, evaluate_at_nodes, interpolate
from . import io
from .config import ExperimentConfig
from .synthetic import GaussianInclusion, PulseSource, generate_synthetic_data

log = logging.getLogger(__name__)

STABILITY_SAFETY = 0.9

ESTIMATE_HEADER = [
    "cycle", "n_cells", "n_steps", "F", "misfit", "regularization", "iterations", "status",
    "lagrangian_bound", "term_eps", "term_lam_omega", "term_lam_gamma", "term_E_omega", "term_E_gamma",
    "coefficient_bound", "tikhonov_bound", "c_eps", "eta", "R_eps_norm",
]


@dataclass
class Problem:
    """Everything the loop needs besides the configuration."""

    mesh: SimplicialMesh
    grid: TimeGrid
    source: PulseSource
    master: ObservationData
    target: GaussianInclusion | None
    cutoff: CutoffFunction


@dataclass
class ReconstructionState:
    cycle: int
    mesh: SimplicialMesh
    grid: TimeGrid
    eps: PermittivityField
    E: object
    lam: object
    indicators: IndicatorField | None = None
    bounds: ErrorBounds | None = None
    estimate: Estimate | None = None
    logs: list = field(default_factory=list)
    history: list = field(default_factory=list)
    status: str = "ok"
    eps0: PermittivityField | None = None


def source_from_config(cfg: ExperimentConfig) -> PulseSource:
    return PulseSource(cfg["source.side"], tuple(cfg["source.direction"]), cfg["source.profile"],
                       cfg["source.frequency"], cfg["source.amplitude"])


def target_from_config(cfg: ExperimentConfig):
    if cfg["target.center"] is None:
        return None
    return GaussianInclusion(tuple(cfg["target.center"]), cfg["target.width"], cfg["target.amplitude"])


def time_grid_for(mesh, T, steps, stable=True) -> TimeGrid:
    """Uniform grid with at least ``steps`` intervals, raised to respect the stability limit."""
    n = steps
    if stable:
        n = max(steps, math.ceil(T / (STABILITY_SAFETY * stable_time_step(mesh))))
    return make_time_grid(T, n)


def reference_field(mesh, cfg: ExperimentConfig) -> PermittivityField:
    eps0 = interpolate(cfg["regularization.eps0"], ScalarSpace(mesh, cfg["domain.eps_degree"]))
    return project_admissible(eps0, cfg["regularization.eps_max"])


def build_problem(cfg: ExperimentConfig) -> Problem:
    mesh = build_box_mesh(cfg["domain.lower"], cfg["domain.upper"], cfg.resolution)
    grid = time_grid_for(mesh, cfg["time.T"], cfg["time.steps"], cfg["time.stable_steps"] == "on")
    source = source_from_config(cfg)
    target = target_from_config(cfg)
    path = cfg["target.observations"]
    if path is not None:
        if cfg.source_path and not Path(path).is_absolute():
            path = str(Path(cfg.source_path).parent / path)
        master = io.read_trace_csv(path, mesh, grid)
    elif target is not None:
        data = generate_synthetic_data(target, source, mesh, grid, cfg["target.fine_factor"],
                                       cfg["noise.sigma"], cfg["noise.seed"], cfg["regularization.eps_max"],
                                       cfg["domain.eps_degree"])
        master = data.master
    else:
        raise ConfigError("either target.center or target.observations is required")
    return Problem(mesh, grid, source, master, target, CutoffFunction(cfg["time.T"], cfg.delta))


def optimizer_options(cfg: ExperimentConfig) -> OptimizerOptions:
    return OptimizerOptions(max_iter=cfg["optimizer.max_iter"], tol=cfg["optimizer.tol"],
                            atol=cfg["optimizer.atol"], initial_change=cfg["optimizer.initial_change"])


def transfer(eps: PermittivityField, mesh: SimplicialMesh) -> PermittivityField:
    """Nodal interpolation of ``eps`` onto a refined mesh, then projection."""
    moved = evaluate_at_nodes(eps, mesh, eps.degree)
    return project_admissible(moved, eps.eps_max)


def reconstruct_adaptive(cfg: ExperimentConfig, problem: Problem | None = None, out_dir=None,
                         export: bool = True) -> ReconstructionState:
    """Minimize, estimate, mark and refine for up to ``adaptivity.max_cycles`` cycles."""
    problem = build_problem(cfg) if problem is None else problem
    out_dir = Path(cfg.output_dir if out_dir is None else out_dir)
    mesh, grid = problem.mesh, problem.grid
    stable = cfg["time.stable_steps"] == "on"
    eps_max = cfg["regularization.eps_max"]
    alpha = cfg["regularization.alpha"]
    opts = optimizer_options(cfg)
    warm = None
    history, logs = [], []
    state = None
    for cycle in range(1, cfg["adaptivity.max_cycles"] + 1):
        if cycle > 1:
            grid = time_grid_for(mesh, cfg["time.T"], max(cfg["time.steps"], grid.n_steps), stable)
        G = problem.master.resample(mesh, grid)
        P = problem.source.neumann(mesh, grid)
        eps0 = reference_field(mesh, cfg)
        reg = RegularizationConfig(alpha, eps0)
        result = minimize(G, P, reg, mesh, grid, opts, z=problem.cutoff, eps_max=eps_max, eps_init=warm)
        u = Triple(result.eps, result.E, result.lam)
        est = estimate_all(u, G, P, problem.cutoff, reg)
        last = result.log[-1]
        row = [cycle, mesh.n_cells, grid.n_steps, last.F, last.misfit, last.regularization,
               last.iteration, result.status, est.bounds.lagrangian_bound,
               *(est.bounds.lagrangian_terms[k] for k in ("eps", "lam_omega", "lam_gamma", "E_omega", "E_gamma")),
               est.bounds.coefficient_bound, est.bounds.tikhonov_bound, est.bounds.c_eps, est.bounds.eta,
               est.bounds.R_eps_norm]
        history.append(dict(zip(ESTIMATE_HEADER, row)))
        logs.append(result.log)
        state = ReconstructionState(cycle, mesh, grid, result.eps, result.E, result.lam, est.indicators,
                                    est.bounds, est, list(logs), list(history),
                                    "ok" if result.status != "line_search_failed" else "optimizer_failed", eps0)
        log.info("cycle %d: %d cells, F=%.4e, indicator total %.4e", cycle, mesh.n_cells, last.F,
                 est.indicators.total)
        if export:
            export_state(state, out_dir / f"cycle_{cycle:02d}")
        if state.status != "ok":
            break
        if cycle == cfg["adaptivity.max_cycles"] or est.indicators.total < cfg["adaptivity.threshold"]:
            break
        marked = mark_cells(est.indicators, cfg["adaptivity.fraction"])
        if len(marked) == 0:
            break
        new_mesh = refine_marked(mesh, marked)
        warm = transfer(result.eps, new_mesh)
        mesh = new_mesh
    if export and state is not None:
        io.write_csv(out_dir / "estimates.csv", ESTIMATE_HEADER, [[h[k] for k in ESTIMATE_HEADER] for h in history])
        (out_dir / "config.resolved").write_text(cfg.dump(), encoding="utf-8")
    return state


def export_state(state: ReconstructionState, directory) -> list:
    """Write mesh fields, time series, logs and a manifest; returns the manifest entries."""
    directory = Path(directory)
    mesh = state.mesh
    entries = []
    cell_data = {"diameter": mesh.diameters}
    if state.indicators is not None:
        cell_data["indicator"] = state.indicators.values
        for name, values in state.indicators.terms.items():
            cell_data[f"indicator_{name}"] = values
    if state.estimate is not None:
        for name, values in state.estimate.residuals.cell_magnitudes(mesh, state.grid).items():
            cell_data[f"abs_{name}"] = values
    point_data = {"eps": state.eps.vertex_values()}
    if state.eps0 is not None:
        point_data["eps0"] = state.eps0.vertex_values()
    f = io.write_vtk(directory / "state.vtk", mesh, point_data, cell_data)
    entries.append((f, "mesh, eps_h (point), indicators and residual magnitudes (cell)"))
    for stem, field_, name in (("E", state.E, "E"), ("lambda", state.lam, "lambda")):
        files, index = io.write_vtk_series(directory / stem, stem, mesh, state.grid, field_.values, name)
        entries.append((index, f"{name} time series index"))
        entries.extend((p, f"{name} at time node {k}") for k, p in enumerate(files))
    for i, records in enumerate(state.logs, start=1):
        entries.append((io.write_iteration_log(directory / f"iterations_cycle{i:02d}.csv", records),
                        f"optimizer log, cycle {i}"))
    if state.history:
        entries.append((io.write_csv(directory / "estimates.csv", ESTIMATE_HEADER,
                                     [[h[k] for k in ESTIMATE_HEADER] for h in state.history]),
                        "estimator and bound log per cycle"))
    trace = ObservationData.from_field(state.E)
    entries.append((io.write_trace_csv(directory / "trace_E.csv", trace), "boundary trace of E_h"))
    manifest = io.write_manifest(directory / "manifest.csv", entries)
    return entries + [(manifest, "manifest")]


def cell_mass_fraction(mesh: SimplicialMesh, values, lower, upper):
    """Share of ``values`` in cells whose centroid lies in the box, and the box volume fraction."""
    centroids = mesh.vertices[mesh.cells].mean(axis=1)
    inside = np.all((centroids >= lower) & (centroids <= upper), axis=1)
    lo, hi = mesh.bounds
    box = float(np.prod(np.asarray(upper) - np.asarray(lower)))
    return float(values[inside].sum() / values.sum()), box / float(np.prod(hi - lo))
