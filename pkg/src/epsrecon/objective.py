"""Tikhonov functional, Lagrangian, coefficient gradient and the minimization loop."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import ConfigError, ContractViolation, UsageError
from .mesh import SimplicialMesh, TimeGrid
from .pde import (
    Assembler,
    BoundaryTrace,
    adjoint_solve,
    direct_solve,
    eps_digest,
    time_matrices,
    weak_form_D,
    weighted_time_mass,
)
from .quadrature import simplex_rule
from .spaces import (
    ScalarField,
    ScalarSpace,
    SpaceTimeField,
    cell_dofs,
    interpolate,
    lagrange_nodes,
    shape_grads,
    shape_values,
)

log = logging.getLogger(__name__)


# -- cut-off -------------------------------------------------------------------------

def _smooth_step(s):
    """C-infinity step: 0 for s <= 0, 1 for s >= 1."""
    s = np.asarray(s, dtype=float)
    with np.errstate(divide="ignore", over="ignore"):
        a = np.where(s > 0, np.exp(-1.0 / np.where(s > 0, s, 1.0)), 0.0)
        b = np.where(s < 1, np.exp(-1.0 / np.where(s < 1, 1.0 - s, 1.0)), 0.0)
    return a / (a + b)


@dataclass(frozen=True)
class CutoffFunction:
    """Data cut-off ``z``: 1 on ``[0, T - delta]``, 0 on ``[T - delta/2, T]``, smooth in between."""

    T: float
    delta: float

    def __post_init__(self):
        if not (self.T > 0 and self.delta > 0):
            raise ConfigError("cut-off needs T > 0 and delta > 0")

    def __call__(self, t):
        s = (self.T - self.delta / 2 - np.asarray(t, dtype=float)) / (self.delta / 2)
        return _smooth_step(s)


def cutoff_value(t, cfg: CutoffFunction) -> float:
    if not (0.0 <= t <= cfg.T):
        raise UsageError(f"t = {t} outside [0, {cfg.T}]")
    return float(cfg(t))


# -- admissible coefficients -------------------------------------------------------

def collar_mask(mesh: SimplicialMesh, degree: int = 1):
    """Lagrange nodes of every cell that touches the boundary."""
    touching = mesh.boundary_node_mask[mesh.cells].any(axis=1)
    mask = np.zeros(len(lagrange_nodes(mesh, degree)), dtype=bool)
    mask[np.unique(cell_dofs(mesh, degree)[touching])] = True
    return mask


class PermittivityField(ScalarField):
    """Scalar field with box bounds ``[1, eps_max]`` and a fixed boundary collar."""

    def __init__(self, mesh, values, degree=1, eps_max=15.0, collar=None):
        super().__init__(mesh, values, degree)
        if eps_max < 1:
            raise ConfigError(f"eps_max must be at least 1, got {eps_max}")
        self.eps_max = float(eps_max)
        self.collar = collar_mask(mesh, degree) if collar is None else np.asarray(collar, dtype=bool)

    def is_admissible(self, tol=0.0):
        v = self.values
        return bool(
            np.all(v >= 1 - tol) and np.all(v <= self.eps_max + tol)
            and np.all(np.abs(v[self.collar] - 1) <= tol)
        )

    def copy(self, values=None):
        return PermittivityField(
            self.mesh, self.values.copy() if values is None else values,
            self.degree, self.eps_max, self.collar,
        )


def project_admissible(eps: ScalarField, eps_max: float, collar=None) -> PermittivityField:
    """Nodal clamp to ``[1, eps_max]`` with collar nodes set to 1."""
    if eps_max < 1:
        raise ConfigError(f"eps_max must be at least 1, got {eps_max}")
    if collar is None:
        collar = getattr(eps, "collar", None)
    if collar is None:
        collar = collar_mask(eps.mesh, eps.degree)
    v = np.clip(eps.values, 1.0, eps_max)
    v[collar] = 1.0
    return PermittivityField(eps.mesh, v, eps.degree, eps_max, collar)


@dataclass
class RegularizationConfig:
    alpha: float
    eps0: ScalarField

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError("alpha > 0 is required")


# -- functional pieces ------------------------------------------------------------------

class _EpsQuadrature:
    """Basis data of the coefficient space at the assembly quadrature points."""

    def __init__(self, mesh, degree):
        self.mesh = mesh
        self.degree = degree
        self.qbary, self.qw = simplex_rule(mesh.dim, degree + 2)
        self.psi = shape_values(degree, self.qbary)  # (nq, nloc)
        self.dpsi = shape_grads(mesh, degree, self.qbary)  # (nc, nq, nloc, d)
        self.phi = shape_values(1, self.qbary)
        self.dofs = cell_dofs(mesh, degree)
        self.ndofs = len(lagrange_nodes(mesh, degree))
        self.wvol = mesh.volumes[:, None] * self.qw[None, :]

    def mass(self):
        loc = np.einsum("cq,qi,qj->cij", self.wvol, self.psi, self.psi)
        nl = self.dofs.shape[1]
        rows = np.repeat(self.dofs, nl, axis=1).ravel()
        cols = np.tile(self.dofs, (1, nl)).ravel()
        return sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(self.ndofs, self.ndofs))

    def assemble(self, local):
        """Sum per-cell local vectors (nc, nloc) into a global dual vector."""
        return np.bincount(self.dofs.ravel(), weights=local.ravel(), minlength=self.ndofs)

    def field_at(self, u: SpaceTimeField):
        """Nodal space-time values at quadrature points, (N + 1, nc, nq, d)."""
        return np.einsum("kcld,ql->kcqd", u.values[:, self.mesh.cells, :], self.phi)


_QCACHE: dict = {}


def _eps_quadrature(mesh, degree):
    key = (id(mesh), degree)
    hit = _QCACHE.get(key)
    if hit is None or hit.mesh is not mesh:
        if len(_QCACHE) > 8:
            _QCACHE.clear()
        hit = _QCACHE[key] = _EpsQuadrature(mesh, degree)
    return hit


def _same_space(a: ScalarField, b: ScalarField):
    if a.mesh is not b.mesh or a.degree != b.degree:
        raise UsageError("coefficient and reference live on different spaces")


def regularization_value(eps: ScalarField, cfg: RegularizationConfig) -> float:
    _same_space(eps, cfg.eps0)
    q = _eps_quadrature(eps.mesh, eps.degree)
    diff = eps.at(q.qbary) - cfg.eps0.at(q.qbary)
    return 0.5 * cfg.alpha * float(np.sum(q.wvol * diff**2))


def misfit_value(E: SpaceTimeField, G: BoundaryTrace, z) -> float:
    """``0.5 * ||(E - G) z||^2`` over the lateral boundary, P1 x P1 traces."""
    if G.mesh is not E.mesh or G.grid != E.grid:
        raise UsageError("observations and field live on different spaces")
    asm = _assembler(E.mesh)
    W = weighted_time_mass(E.grid, lambda t: np.asarray(z(t)) ** 2)
    diff = E.values[:, E.mesh.boundary_nodes, :] - G.values  # (N+1, nb, d)
    Mb = asm.boundary_mass[E.mesh.boundary_nodes][:, E.mesh.boundary_nodes]
    inner = np.einsum("kbd,lbd->kl", diff, np.stack([Mb @ x for x in diff]))
    return 0.5 * float(np.sum(W * inner))


_ACACHE: dict = {}


def _assembler(mesh, degree=1):
    key = (id(mesh), degree)
    hit = _ACACHE.get(key)
    if hit is None or hit.mesh is not mesh:
        if len(_ACACHE) > 8:
            _ACACHE.clear()
        hit = _ACACHE[key] = Assembler(mesh, degree)
    return hit


def tikhonov_terms(eps, E, G, cfg, z):
    """(misfit, regularization) parts of the Tikhonov functional."""
    return misfit_value(E, G, z), regularization_value(eps, cfg)


def tikhonov_value(eps, E, G, cfg: RegularizationConfig, z) -> float:
    mis, reg = tikhonov_terms(eps, E, G, cfg, z)
    return mis + reg


def lagrangian_value(eps, E, lam, G, P, cfg, z) -> float:
    """``L = F(eps, E) + D(eps, E, lambda)``."""
    return tikhonov_value(eps, E, G, cfg, z) + weak_form_D(eps, E, lam, P)


def grad_eps(eps: ScalarField, E: SpaceTimeField, lam: SpaceTimeField, cfg: RegularizationConfig,
             debug: bool = False):
    """Dual vector of dL/deps over the coefficient basis.

    ``g_i = alpha <eps - eps0, psi_i> - <E_t . lam_t, psi_i> + <div(lam) E, grad(psi_i / eps)>``,
    the last two over space-time, assembled with the solver's quadrature so
    that it is the exact derivative of the discrete functional.
    """
    _same_space(eps, cfg.eps0)
    if E.mesh is not eps.mesh or lam.mesh is not eps.mesh or E.grid != lam.grid:
        raise UsageError("fields live on different spaces")
    if debug:
        digest = eps_digest(eps)
        for name, u in (("E", E), ("lambda", lam)):
            if u.meta.get("eps_digest") not in (None, digest):
                raise ContractViolation(f"{name} was solved for a different coefficient")
    q = _eps_quadrature(eps.mesh, eps.degree)
    grid = E.grid
    tau = grid.tau
    epsq = eps.at(q.qbary)
    geps = eps.grad_at(q.qbary)
    reg = cfg.alpha * (epsq - cfg.eps0.at(q.qbary))  # (nc, nq)

    Eq = q.field_at(E)  # (N+1, nc, nq, d)
    Lq = q.field_at(lam)
    dE = np.diff(Eq, axis=0)
    dL = np.diff(Lq, axis=0)
    time_prod = np.einsum("kcqd,kcqd->cq", dE, dL) / tau  # sum_k tau * (dE/tau).(dL/tau)

    Tm, _ = time_matrices(grid)
    divl = lam.divergence()  # (N+1, nc)
    Y = np.einsum("kl,kc,lcqd->cqd", Tm, divl, Eq)  # int div(lam) E dt

    local = np.einsum("cq,cq,ql->cl", q.wvol, reg - time_prod, q.psi)
    local += np.einsum("cq,cqd,cqld->cl", q.wvol / epsq, Y, q.dpsi)
    local -= np.einsum("cq,cq,ql->cl", q.wvol, np.einsum("cqd,cqd->cq", Y, geps) / epsq**2, q.psi)
    return q.assemble(local)


# -- minimization --------------------------------------------------------------------

@dataclass
class OptimizerOptions:
    max_iter: int = 50
    tol: float = 1e-6          # relative to the initial projected-gradient norm
    atol: float = 1e-12        # absolute floor
    initial_change: float = 0.5  # max-norm change of eps for the first trial step
    c1: float = 1e-4
    shrink: float = 0.5
    max_backtracks: int = 30

    def __post_init__(self):
        if self.max_iter < 0 or self.tol <= 0 or self.atol < 0:
            raise ConfigError("invalid optimizer options")
        if not (0 < self.shrink < 1) or not (0 < self.c1 < 1):
            raise ConfigError("line-search parameters out of range")


@dataclass
class IterationRecord:
    iteration: int
    F: float
    misfit: float
    regularization: float
    grad_norm: float
    step: float


@dataclass
class MinimizeResult:
    eps: PermittivityField
    E: SpaceTimeField
    lam: SpaceTimeField
    log: list = field(default_factory=list)
    status: str = "max_iter"

    @property
    def F_history(self):
        return [r.F for r in self.log]


class ReducedProblem:
    """``eps -> F(eps)`` with the state eliminated by the direct solver."""

    def __init__(self, G, P, cfg: RegularizationConfig, z, eps_max):
        self.G, self.P, self.cfg, self.z = G, P, cfg, z
        self.eps_max = float(eps_max)
        self.grid = P.grid
        self.mesh = P.mesh

    def state(self, eps):
        E = direct_solve(eps, self.P, self.grid)
        mis, reg = tikhonov_terms(eps, E, self.G, self.cfg, self.z)
        return mis + reg, mis, reg, E

    def value(self, eps):
        return self.state(eps)[0]

    def gradient(self, eps, E):
        lam = adjoint_solve(eps, E, self.G, self.z)
        return grad_eps(eps, E, lam, self.cfg), lam

    def directional_derivative(self, eps, direction):
        F, _, _, E = self.state(eps)
        g, _ = self.gradient(eps, E)
        return float(g @ direction)


def projected_gradient(eps: PermittivityField, g, tol=1e-12):
    pg = np.where(eps.collar, 0.0, g)
    at_lower = (eps.values <= 1.0 + tol) & (pg > 0)
    at_upper = (eps.values >= eps.eps_max - tol) & (pg < 0)
    pg[at_lower | at_upper] = 0.0
    return pg


def minimize(G, P, cfg: RegularizationConfig, mesh: SimplicialMesh, grid: TimeGrid,
             opts: OptimizerOptions | None = None, z=None, eps_max=15.0, eps_init=None) -> MinimizeResult:
    """Projected Polak-Ribiere conjugate gradients with Armijo backtracking.

    Starts from ``eps_init`` (default: the reference ``cfg.eps0``) projected
    onto the admissible set. Search directions are built from the L2 Riesz
    representative of the gradient on the free (non-collar) nodes.
    """
    opts = opts or OptimizerOptions()
    if P.mesh is not mesh or G.mesh is not mesh or P.grid != grid or G.grid != grid:
        raise UsageError("data do not live on the given mesh and grid")
    z = z or CutoffFunction(grid.T, 0.1 * grid.T)
    prob = ReducedProblem(G, P, cfg, z, eps_max)
    start = cfg.eps0 if eps_init is None else eps_init
    eps = project_admissible(start, eps_max)
    free = ~eps.collar
    Mf = _eps_quadrature(mesh, eps.degree).mass()[free][:, free].tocsc()
    mass_lu = spla.splu(Mf)

    def riesz(v):
        out = np.zeros_like(v)
        out[free] = mass_lu.solve(v[free])
        return out

    F, mis, reg, E = prob.state(eps)
    g, lam = prob.gradient(eps, E)
    pg = projected_gradient(eps, g)
    r = riesz(pg)
    gnorm = math.sqrt(max(float(pg @ r), 0.0))
    gnorm0 = gnorm
    history = [IterationRecord(0, F, mis, reg, gnorm, 0.0)]
    result = MinimizeResult(eps, E, lam, history, "max_iter")

    def converged(gn):
        return gn <= opts.atol or (gnorm0 > 0 and gn <= opts.tol * gnorm0)

    if converged(gnorm):
        result.status = "converged"
        return result

    direction = -r
    step = None
    for it in range(1, opts.max_iter + 1):
        direction = np.where(free, direction, 0.0)
        blocked = ((eps.values <= 1.0) & (direction < 0)) | ((eps.values >= eps_max) & (direction > 0))
        direction[blocked] = 0.0
        if float(g @ direction) >= 0 or not np.any(direction):
            direction = -r  # restart with steepest descent
            direction[blocked] = 0.0
        dmax = float(np.abs(direction).max())
        if dmax == 0:
            result.status = "converged"
            break
        s = opts.initial_change / dmax if step is None else 2.0 * step
        accepted = False
        for _ in range(opts.max_backtracks + 1):
            trial = project_admissible(eps.copy(eps.values + s * direction), eps_max, eps.collar)
            predicted = float(g @ (trial.values - eps.values))
            if predicted < 0:
                Ft, mist, regt, Et = prob.state(trial)
                if Ft <= F + opts.c1 * predicted:
                    accepted = True
                    break
            s *= opts.shrink
        if not accepted:
            result.status = "line_search_failed"
            log.info("line search failed at iteration %d", it)
            break
        step = s
        eps, F, mis, reg, E = trial, Ft, mist, regt, Et
        g, lam = prob.gradient(eps, E)
        pg_new = projected_gradient(eps, g)
        r_new = riesz(pg_new)
        gnorm = math.sqrt(max(float(pg_new @ r_new), 0.0))
        beta = max(0.0, float(pg_new @ (r_new - r)) / max(float(pg @ r), 1e-300))
        direction = -r_new + beta * direction
        pg, r = pg_new, r_new
        history.append(IterationRecord(it, F, mis, reg, gnorm, s))
        result = MinimizeResult(eps, E, lam, history, result.status)
        log.debug("iter %d F=%.6e |pg|=%.3e step=%.3e", it, F, gnorm, s)
        if converged(gnorm):
            result.status = "converged"
            break
    return result


def constant_field(mesh, value=1.0, degree=1):
    return interpolate(value, ScalarSpace(mesh, degree))
