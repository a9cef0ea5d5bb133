"""Residuals, a posteriori error indicators and bulk marking.

All space-time integrals are evaluated with a cell quadrature rule in space
and a Gauss rule on every time interval. Spatial maximal jumps are cellwise
constants (the maximum over the cell boundary) sampled at the face vertices
and face centroids; temporal maximal jumps are evaluated pointwise. Bounds
are computed with all constants set to one and are therefore indicators,
not guaranteed bounds.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import UsageError
from .pde import BoundaryTrace
from .quadrature import gauss_interval, simplex_rule
from .spaces import (
    ScalarField,
    SpaceTimeField,
    face_sample_bary,
    shape_values,
    spatial_max_jump,
    temporal_max_jump,
)

TIME_POINTS = 3


@dataclass(eq=False)
class Triple:
    """A discrete state ``(eps_h, E_h, lambda_h)`` on a common mesh and time grid."""

    eps: ScalarField
    E: SpaceTimeField
    lam: SpaceTimeField
    _cache: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        m = self.eps.mesh
        if self.E.mesh is not m or self.lam.mesh is not m:
            raise UsageError("state members live on different meshes")
        if self.E.grid != self.lam.grid:
            raise UsageError("state members live on different time grids")

    @property
    def mesh(self):
        return self.eps.mesh

    @property
    def grid(self):
        return self.E.grid


def as_triple(u_h) -> Triple:
    return u_h if isinstance(u_h, Triple) else Triple(*u_h)


class PointSet:
    """Quadrature points given by owning cell, barycentric coordinates and weight."""

    def __init__(self, cell, bary, weights):
        self.cell = np.asarray(cell)
        self.bary = np.asarray(bary, dtype=float)
        self.weights = np.asarray(weights, dtype=float)

    def __len__(self):
        return len(self.cell)


def cell_points(mesh, eps_degree=1) -> PointSet:
    qb, qw = simplex_rule(mesh.dim, 2 * eps_degree)
    nc, nq = mesh.n_cells, len(qw)
    return PointSet(
        np.repeat(np.arange(nc), nq),
        np.tile(qb, (nc, 1)),
        (mesh.volumes[:, None] * qw[None, :]).ravel(),
    )


def boundary_points(mesh, eps_degree=1) -> PointSet:
    """Face quadrature on the boundary, expressed in the owning cells."""
    fb, fw = simplex_rule(mesh.dim - 1, 2 * eps_degree)
    owner, local = mesh.boundary_owner()
    nl = mesh.dim + 1
    bary = np.zeros((len(owner), len(fw), nl))
    for j, i in enumerate(local):
        bary[j][:, np.delete(np.arange(nl), i)] = fb
    weights = mesh.face_measures_local[owner, local][:, None] * fw[None, :]
    return PointSet(np.repeat(owner, len(fw)), bary.reshape(-1, nl), weights.ravel())


def _nodal_at(values, mesh, pts: PointSet):
    """P1 nodal vector data (K, nv, d) at points, (K, np, d)."""
    return np.einsum("pl,kpld->kpd", pts.bary, values[:, mesh.cells[pts.cell], :])


def _at_time_points(nodal, theta):
    return np.einsum("g,k...->kg...", 1 - theta, nodal[:-1]) + np.einsum("g,k...->kg...", theta, nodal[1:])


class _Sampler:
    """Shared pointwise evaluations for one state."""

    def __init__(self, u: Triple):
        self.u = u
        self.mesh = u.mesh
        self.grid = u.grid
        self.theta, self.tw = gauss_interval(TIME_POINTS)
        self.omega = cell_points(self.mesh, u.eps.degree)
        self.gamma = boundary_points(self.mesh, u.eps.degree)

    # coefficient
    def eps_at(self, pts):
        psi = shape_values(self.u.eps.degree, pts.bary)  # (np, nloc)
        return np.einsum("pl,pl->p", self.u.eps.local()[pts.cell], psi)

    @cached_property
    def grad_eps_vertices(self):
        return self.u.eps.grad_at(np.eye(self.mesh.dim + 1))  # (nc, d+1, d)

    def grad_eps_at(self, pts):
        return np.einsum("pl,pld->pd", pts.bary, self.grad_eps_vertices[pts.cell])

    @cached_property
    def hessian_eps(self):
        return self.u.eps.hessian()  # (nc, d, d)

    # space-time fields
    @cached_property
    def jac_E(self):
        return _at_time_points(self.u.E.jacobians(), self.theta)  # (N, nt, nc, d, d)

    @cached_property
    def jac_lam(self):
        return _at_time_points(self.u.lam.jacobians(), self.theta)

    @cached_property
    def div_E(self):
        return np.einsum("kgcii->kgc", self.jac_E)

    @cached_property
    def div_lam(self):
        return np.einsum("kgcii->kgc", self.jac_lam)

    def field_at(self, u: SpaceTimeField, pts):
        return _at_time_points(_nodal_at(u.values, self.mesh, pts), self.theta)  # (N, nt, np, d)

    def slope_jump_at(self, u: SpaceTimeField, pts):
        """Temporal maximal jump of du/dt at points, (N, np, d)."""
        return temporal_max_jump(_nodal_at(u.slopes(), self.mesh, pts))

    @cached_property
    def samples(self):
        return face_sample_bary(self.mesh)  # (nc, d+1, s, d+1)

    @cached_property
    def E_normal(self):
        """Maximal jump of dE/dnu, (N, nt, nc, d)."""
        return _cellwise(spatial_max_jump(
            np.einsum("kgcab,cib->cikga", self.jac_E, self.mesh.normals), self.mesh))

    @cached_property
    def lam_normal(self):
        return _cellwise(spatial_max_jump(
            np.einsum("kgcab,cib->cikga", self.jac_lam, self.mesh.normals), self.mesh))

    @cached_property
    def eps_normal(self):
        """Maximal jump of d(eps)/dnu, (nc,)."""
        g = np.einsum("cisl,cld->cisd", self.samples, self.grad_eps_vertices)
        return spatial_max_jump(np.einsum("cisd,cid->cis", g, self.mesh.normals), self.mesh, sampled=True)

    @cached_property
    def E_samples(self):
        """E at face samples and time points, (nc, d+1, s, N, nt, d)."""
        local = self.u.E.values[:, self.mesh.cells, :]  # (N+1, nc, nl, d)
        at = np.einsum("cisl,kcld->kcisd", self.samples, local)
        return np.moveaxis(_at_time_points(at, self.theta), (0, 1), (3, 4))

    @cached_property
    def nuE_divlam(self):
        """Maximal jump of (nu . E) div(lambda), (N, nt, nc)."""
        nuE = np.einsum("ciskgd,cid->ciskg", self.E_samples, self.mesh.normals)
        tr = nuE * np.moveaxis(self.div_lam, 2, 0)[:, None, None]
        return _cellwise(spatial_max_jump(tr, self.mesh, sampled=True))

    @cached_property
    def gradepsE_nu(self):
        """Maximal jump of (grad(eps) . E) nu, componentwise, (N, nt, nc, d)."""
        g = np.einsum("cisl,cld->cisd", self.samples, self.grad_eps_vertices)
        dot = np.einsum("ciskgd,cisd->ciskg", self.E_samples, g)
        tr = dot[..., None] * self.mesh.normals[:, :, None, None, None, :]
        return _cellwise(spatial_max_jump(tr, self.mesh, sampled=True))

    @cached_property
    def divlam_dt_jump(self):
        """Temporal maximal jump of d(div lambda)/dt, (N, nc)."""
        return temporal_max_jump(np.diff(self.u.lam.divergence(), axis=0) / self.grid.tau)


def _cellwise(a):
    """Move a leading cell axis behind the two time axes: (nc, N, nt, ...) -> (N, nt, nc, ...)."""
    return np.moveaxis(a, 0, 2)


def _sampler(u: Triple) -> _Sampler:
    s = u._cache.get("sampler")
    if s is None:
        s = u._cache["sampler"] = _Sampler(u)
    return s


# -- residual and jump containers --------------------------------------------------

@dataclass
class JumpFields:
    """Maximal jumps entering the weights of the Lagrangian estimate.

    Cell arrays are indexed by cell; ``*_dt_omega`` and ``*_dt_gamma`` are
    evaluated at the interior and boundary quadrature points.
    """

    eps_normal: np.ndarray        # (nc,)
    E_normal: np.ndarray          # (N, nt, nc, d)
    lam_normal: np.ndarray        # (N, nt, nc, d)
    E_dt_omega: np.ndarray        # (N, np, d)
    lam_dt_omega: np.ndarray
    E_dt_gamma: np.ndarray        # (N, npb, d)
    lam_dt_gamma: np.ndarray
    divlam_dt: np.ndarray         # (N, nc)


@dataclass
class ResidualFields:
    """Residuals at quadrature points: interior arrays over ``omega``, boundary over ``gamma``."""

    R_eps: np.ndarray | None = None          # (np,)
    R_lam_omega: np.ndarray | None = None    # (N, nt, np, d)
    R_lam_gamma: np.ndarray | None = None    # (N, nt, npb, d)
    R_E_omega: np.ndarray | None = None
    R_E_gamma: np.ndarray | None = None
    omega: PointSet | None = None
    gamma: PointSet | None = None

    def merged(self, other: "ResidualFields"):
        out = ResidualFields(**{k: getattr(self, k) for k in self.__dataclass_fields__})
        for k in self.__dataclass_fields__:
            v = getattr(other, k)
            if v is not None:
                setattr(out, k, v)
        return out

    def cell_magnitudes(self, mesh, grid):
        """Per-cell root of the integrated squared norm of each residual."""
        _, tw = gauss_interval(TIME_POINTS)
        out = {}
        if self.R_eps is not None:
            out["R_eps"] = _cell_l2(self.R_eps**2, self.omega, mesh)
        for name, pts in (("R_lam_omega", self.omega), ("R_lam_gamma", self.gamma),
                          ("R_E_omega", self.omega), ("R_E_gamma", self.gamma)):
            R = getattr(self, name)
            if R is not None:
                sq = grid.tau * np.einsum("g,kgp->p", tw, np.sum(R**2, axis=-1))
                out[name] = _cell_l2(sq, pts, mesh)
        return out


def _cell_l2(sq, pts, mesh):
    return np.sqrt(np.bincount(pts.cell, weights=pts.weights * sq, minlength=mesh.n_cells))


def compute_jumps(u_h) -> JumpFields:
    u = as_triple(u_h)
    s = _sampler(u)
    return JumpFields(
        eps_normal=s.eps_normal,
        E_normal=s.E_normal,
        lam_normal=s.lam_normal,
        E_dt_omega=s.slope_jump_at(u.E, s.omega),
        lam_dt_omega=s.slope_jump_at(u.lam, s.omega),
        E_dt_gamma=s.slope_jump_at(u.E, s.gamma),
        lam_dt_gamma=s.slope_jump_at(u.lam, s.gamma),
        divlam_dt=s.divlam_dt_jump,
    )


def _check_cfg(u, cfg):
    if cfg.eps0.mesh is not u.mesh or cfg.eps0.degree != u.eps.degree:
        raise UsageError("reference coefficient lives on a different space")


def residual_eps(u_h, cfg) -> ResidualFields:
    """``R_eps`` at the interior quadrature points."""
    u = as_triple(u_h)
    _check_cfg(u, cfg)
    s = _sampler(u)
    pts = s.omega
    tau = u.grid.tau
    eps = s.eps_at(pts)
    eps0 = np.einsum("pl,pl->p", cfg.eps0.local()[pts.cell], shape_values(u.eps.degree, pts.bary))
    Et = _nodal_at(u.E.slopes(), u.mesh, pts)
    Lt = _nodal_at(u.lam.slopes(), u.mesh, pts)
    time_term = tau * np.einsum("kpd,kpd->p", Et, Lt)
    tw = s.tw
    div_term = tau * np.einsum("g,kgc,kgc->c", tw, s.div_E, s.div_lam)[pts.cell] / eps
    h = u.mesh.diameters[pts.cell]
    jump_term = tau * np.einsum("g,kgc->c", tw, s.nuE_divlam)[pts.cell] / (h * eps)
    R = cfg.alpha * (eps - eps0) - time_term - div_term + jump_term
    return ResidualFields(R_eps=R, omega=pts, gamma=s.gamma)


def _trace_at(trace: BoundaryTrace, mesh, pts, theta):
    return _at_time_points(_nodal_at(trace.full(), mesh, pts), theta)


def residual_adjoint_pair(u_h, G: BoundaryTrace, z) -> ResidualFields:
    """``R_{lambda,Omega}`` at interior points and ``R_{lambda,Gamma}`` at boundary points."""
    u = as_triple(u_h)
    if G.mesh is not u.mesh or G.grid != u.grid:
        raise UsageError("observations live on a different mesh or grid")
    s = _sampler(u)
    pts, bpts = s.omega, s.gamma
    tau = u.grid.tau
    h = u.mesh.diameters[pts.cell]
    eps = s.eps_at(pts)
    ajt = s.slope_jump_at(u.lam, pts)  # (N, np, d)
    R_om = (-eps[None, None, :, None] * ajt[:, None] / tau
            + s.lam_normal[:, :, pts.cell] / (2 * h[None, None, :, None])
            + (s.div_lam[:, :, pts.cell] / eps)[..., None] * s.grad_eps_at(pts)[None, None])
    owner, local = u.mesh.boundary_owner()
    nfq = len(bpts) // len(owner)
    nu = np.repeat(u.mesh.normals[owner, local], nfq, axis=0)  # (npb, d)
    dlam_dnu = np.einsum("kgpab,pb->kgpa", s.jac_lam[:, :, bpts.cell], nu)
    t = u.grid.nodes[:-1, None] + s.theta[None, :] * tau
    z2 = np.asarray(z(t), dtype=float) ** 2  # (N, nt)
    misfit = s.field_at(u.E, bpts) - _trace_at(G, u.mesh, bpts, s.theta)
    R_ga = dlam_dnu + z2[:, :, None, None] * misfit
    return ResidualFields(R_lam_omega=R_om, R_lam_gamma=R_ga, omega=pts, gamma=bpts)


def residual_direct_pair(u_h, P: BoundaryTrace) -> ResidualFields:
    """``R_{E,Omega}`` at interior points and ``R_{E,Gamma}`` at boundary points."""
    u = as_triple(u_h)
    if P.mesh is not u.mesh or P.grid != u.grid:
        raise UsageError("source lives on a different mesh or grid")
    s = _sampler(u)
    pts, bpts = s.omega, s.gamma
    tau = u.grid.tau
    h = u.mesh.diameters[pts.cell][None, None, :, None]
    eps = s.eps_at(pts)
    e4 = eps[None, None, :, None]
    ge = s.grad_eps_at(pts)  # (np, d)
    E = s.field_at(u.E, pts)  # (N, nt, np, d)
    ajt = s.slope_jump_at(u.E, pts)
    gE = np.einsum("pd,kgpd->kgp", ge, E)[..., None]
    hess_term = np.einsum("pab,kgpa->kgpb", s.hessian_eps[pts.cell], E)  # J_grad^T E
    jacT_term = np.einsum("kgpab,pa->kgpb", s.jac_E[:, :, pts.cell], ge)  # J_E^T grad eps
    R_om = (-e4 * ajt[:, None] / tau
            + s.E_normal[:, :, pts.cell] / (2 * h)
            + gE / e4**2 * ge[None, None]
            - (hess_term + jacT_term) / e4
            + s.gradepsE_nu[:, :, pts.cell] / (2 * h * e4))
    owner, local = u.mesh.boundary_owner()
    nfq = len(bpts) // len(owner)
    nu = np.repeat(u.mesh.normals[owner, local], nfq, axis=0)
    dE_dnu = np.einsum("kgpab,pb->kgpa", s.jac_E[:, :, bpts.cell], nu)
    R_ga = dE_dnu - _trace_at(P, u.mesh, bpts, s.theta)
    return ResidualFields(R_E_omega=R_om, R_E_gamma=R_ga, omega=pts, gamma=bpts)


def compute_residuals(u_h, G, P, z, cfg) -> ResidualFields:
    u = as_triple(u_h)
    return residual_eps(u, cfg).merged(residual_adjoint_pair(u, G, z)).merged(residual_direct_pair(u, P))


# -- estimates ---------------------------------------------------------------------

@dataclass
class IndicatorField:
    """Per-cell nonnegative contributions; ``terms`` holds the five addends separately."""

    values: np.ndarray
    terms: dict

    @property
    def total(self):
        return float(self.values.sum())


def _weights(tau, h_cell, dt_jump, normal_jump, pts):
    """``tau |[du/dt]_t| + h |[du/dnu]_s|`` at points and time points, (N, nt, np)."""
    a = tau * np.linalg.norm(dt_jump, axis=-1)[:, None, :]
    b = h_cell[pts.cell][None, None, :] * np.linalg.norm(normal_jump[:, :, pts.cell], axis=-1)
    return a + b


def _space_time_cells(integrand, pts, tau, tw, nc):
    per_point = tau * np.einsum("g,kgp->p", tw, integrand)
    return np.bincount(pts.cell, weights=pts.weights * per_point, minlength=nc)


def lagrangian_error_estimate(u_h, residuals: ResidualFields, jumps: JumpFields):
    """Total of the Lagrangian estimate (constants set to one) and its per-cell indicators."""
    u = as_triple(u_h)
    mesh, tau = u.mesh, u.grid.tau
    _, tw = gauss_interval(TIME_POINTS)
    nc = mesh.n_cells
    om, ga = residuals.omega, residuals.gamma
    h = mesh.diameters
    if any(getattr(residuals, k) is None for k in ("R_eps", "R_lam_omega", "R_lam_gamma", "R_E_omega", "R_E_gamma")):
        raise UsageError("all five residuals are required")
    terms = {}
    w_eps = h * jumps.eps_normal
    terms["eps"] = np.bincount(om.cell, weights=om.weights * np.abs(residuals.R_eps) * w_eps[om.cell], minlength=nc)
    wE_om = _weights(tau, h, jumps.E_dt_omega, jumps.E_normal, om)
    wE_ga = _weights(tau, h, jumps.E_dt_gamma, jumps.E_normal, ga)
    wl_om = _weights(tau, h, jumps.lam_dt_omega, jumps.lam_normal, om)
    wl_ga = _weights(tau, h, jumps.lam_dt_gamma, jumps.lam_normal, ga)
    nrm = lambda R: np.linalg.norm(R, axis=-1)  # noqa: E731
    terms["lam_omega"] = _space_time_cells(nrm(residuals.R_lam_omega) * wE_om, om, tau, tw, nc)
    terms["lam_gamma"] = _space_time_cells(nrm(residuals.R_lam_gamma) * wE_ga, ga, tau, tw, nc)
    terms["E_omega"] = _space_time_cells(nrm(residuals.R_E_omega) * wl_om, om, tau, tw, nc)
    terms["E_gamma"] = _space_time_cells(nrm(residuals.R_E_gamma) * wl_ga, ga, tau, tw, nc)
    indicators = sum(terms.values())
    ind = IndicatorField(indicators, terms)
    return ind.total, ind


def stability_eta(u_h) -> float:
    """The stability functional of the coefficient estimate."""
    u = as_triple(u_h)
    s = _sampler(u)
    pts = s.omega
    tau = u.grid.tau
    h = u.mesh.diameters
    j = compute_jumps(u)
    lam_dt = np.linalg.norm(j.lam_dt_omega, axis=-1)[:, None, :]  # (N, 1, np)
    E_dt = np.linalg.norm(j.E_dt_omega, axis=-1)[:, None, :]
    wE = _weights(tau, h, j.E_dt_omega, j.E_normal, pts)
    wl = _weights(tau, h, j.lam_dt_omega, j.lam_normal, pts)
    first = (lam_dt / tau + np.abs(s.div_lam[:, :, pts.cell])) * wE
    second = (E_dt / tau) * wl
    Enorm = np.linalg.norm(s.field_at(u.E, pts), axis=-1)
    third = Enorm * (np.linalg.norm(j.lam_normal[:, :, pts.cell], axis=-1)
                     + tau * j.divlam_dt[:, None, pts.cell])
    return float(_space_time_cells(first + second + third, pts, tau, s.tw, u.mesh.n_cells).sum())


def c_eps(eps: ScalarField) -> float:
    """``max(1, max |grad eps|)``; cellwise for q = 1, sampled at cell vertices for q = 2."""
    g = eps.grad_at(np.eye(eps.mesh.dim + 1))
    return max(1.0, float(np.linalg.norm(g, axis=-1).max()))


@dataclass
class ErrorBounds:
    """Constant-free indicators; every constant in the estimates is taken as one."""

    lagrangian_bound: float | None
    coefficient_bound: float
    tikhonov_bound: float
    c_eps: float
    eta: float
    R_eps_norm: float
    lagrangian_terms: dict = field(default_factory=dict)
    constant_free: bool = True


def _R_eps_norm(residual: ResidualFields):
    return float(np.sqrt(np.sum(residual.omega.weights * residual.R_eps**2)))


def _bound_components(u_h, cfg, residual=None):
    u = as_triple(u_h)
    residual = residual_eps(u, cfg) if residual is None else residual
    return c_eps(u.eps), stability_eta(u), _R_eps_norm(residual)


def coefficient_error_bound(u_h, cfg, residual: ResidualFields | None = None) -> ErrorBounds:
    ce, eta, rn = _bound_components(u_h, cfg, residual)
    return ErrorBounds(None, ce * eta + rn, (ce * eta) ** 2 + rn**2, ce, eta, rn)


def tikhonov_error_bound(u_h, cfg, residual: ResidualFields | None = None) -> ErrorBounds:
    return coefficient_error_bound(u_h, cfg, residual)


def tikhonov_from_components(b: ErrorBounds) -> float:
    return (b.c_eps * b.eta) ** 2 + b.R_eps_norm**2


@dataclass
class Estimate:
    residuals: ResidualFields
    jumps: JumpFields
    indicators: IndicatorField
    bounds: ErrorBounds


def estimate_all(u_h, G, P, z, cfg) -> Estimate:
    """Residuals, jumps, Lagrangian indicators and the coefficient/functional bounds."""
    u = as_triple(u_h)
    res = compute_residuals(u, G, P, z, cfg)
    jumps = compute_jumps(u)
    total, ind = lagrangian_error_estimate(u, res, jumps)
    b = coefficient_error_bound(u, cfg, res)
    b.lagrangian_bound = total
    b.lagrangian_terms = {k: float(v.sum()) for k, v in ind.terms.items()}
    return Estimate(res, jumps, ind, b)


def mark_cells(indicators, fraction: float):
    """Bulk marking: the smallest set of largest indicators reaching ``fraction`` of the total.

    Ties are broken by cell index. Returns a sorted index array; empty if all
    indicators vanish.
    """
    eta = np.asarray(getattr(indicators, "values", indicators), dtype=float)
    if not (0 < fraction <= 1):
        raise UsageError("marking fraction must lie in (0, 1]")
    if np.any(eta < 0) or not np.all(np.isfinite(eta)):
        raise UsageError("indicators must be finite and nonnegative")
    total = eta.sum()
    if total == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(len(eta)), -eta))
    csum = np.cumsum(eta[order])
    n = int(np.searchsorted(csum, fraction * total * (1 - 1e-14), side="left")) + 1
    chosen = order[:n]
    chosen = chosen[eta[chosen] > 0]
    return np.sort(chosen)
