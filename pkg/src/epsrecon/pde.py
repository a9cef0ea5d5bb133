"""Direct and adjoint wave solvers and the weak forms they satisfy.

The second-order system for the field ``E`` is discretized with continuous
piecewise linear functions in space and time. Trial and test functions of the
space-time Galerkin method differ only in which end time level is pinned to
zero, so the global system is block tridiagonal in time and is solved by an
equivalent three-level marching scheme: with ``A = M/tau + tau*S/6`` and
``B = 2M/tau - 2*tau*S/3`` (``M`` the eps-weighted mass, ``S`` stiffness plus
coupling)::

    A E_1 = b_0
    A E_{k+1} = b_k + B E_k - A E_{k-1}

The adjoint runs the transposed recursion backwards from ``lambda_N = 0``.
"""
from __future__ import annotations

import hashlib
import logging

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import SolverError, UsageError
from .mesh import SimplicialMesh, TimeGrid, check_time_step
from .quadrature import gauss_interval, simplex_rule
from .spaces import ScalarField, SpaceTimeField, check_same_spaces, shape_values

log = logging.getLogger(__name__)


def eps_digest(eps: ScalarField) -> str:
    h = hashlib.sha1(np.ascontiguousarray(eps.values).tobytes())
    h.update(str(eps.degree).encode())
    h.update(str(id(eps.mesh)).encode())
    return h.hexdigest()


# -- boundary trace tables ---------------------------------------------------------

class BoundaryTrace:
    """Vector-valued nodal table on the boundary nodes x time nodes.

    ``values`` has shape (N + 1, nb, d) with rows ordered like
    ``mesh.boundary_nodes``. Between nodes the trace is linear in space (on
    boundary faces) and in time.
    """

    def __init__(self, mesh: SimplicialMesh, grid: TimeGrid, values):
        values = np.asarray(values, dtype=float)
        shape = (grid.n_steps + 1, len(mesh.boundary_nodes), mesh.dim)
        if values.shape != shape:
            raise UsageError(f"trace must have shape {shape}, got {values.shape}")
        if not np.all(np.isfinite(values)):
            raise UsageError("trace contains non-finite values")
        self.mesh = mesh
        self.grid = grid
        self.values = values

    @classmethod
    def from_function(cls, f, mesh, grid):
        """Sample ``f(x, t) -> (n, d)`` at boundary nodes and time nodes."""
        x = mesh.vertices[mesh.boundary_nodes]
        return cls(mesh, grid, np.stack([np.asarray(f(x, t), dtype=float) for t in grid.nodes]))

    @classmethod
    def zeros(cls, mesh, grid):
        return cls(mesh, grid, np.zeros((grid.n_steps + 1, len(mesh.boundary_nodes), mesh.dim)))

    @classmethod
    def from_field(cls, E: SpaceTimeField):
        return cls(E.mesh, E.grid, E.values[:, E.mesh.boundary_nodes, :])

    def full(self):
        """Zero-padded nodal array of shape (N + 1, nv, d)."""
        out = np.zeros((self.grid.n_steps + 1, self.mesh.n_vertices, self.mesh.dim))
        out[:, self.mesh.boundary_nodes, :] = self.values
        return out

    def resample(self, mesh: SimplicialMesh, grid: TimeGrid):
        """Linear interpolation of the trace onto another boundary layout and time grid."""
        if mesh is self.mesh and grid == self.grid:
            return type(self)(mesh, grid, self.values.copy())
        spatial = _boundary_interpolation(self.mesh, mesh)  # (nb_new, nb_old)
        vals = np.stack([spatial @ v for v in self.values])
        if grid != self.grid:
            pos = np.clip(grid.nodes / self.grid.tau, 0, self.grid.n_steps)
            j = np.minimum(np.floor(pos).astype(int), self.grid.n_steps - 1)
            theta = pos - j
            if not np.isclose(grid.T, self.grid.T):
                raise UsageError("time grids cover different intervals")
            vals = (1 - theta)[:, None, None] * vals[j] + theta[:, None, None] * vals[j + 1]
        return type(self)(mesh, grid, vals)

    def copy(self, values=None):
        return type(self)(self.mesh, self.grid, self.values.copy() if values is None else values)


class NeumannData(BoundaryTrace):
    """Boundary normal derivative data ``P``."""


class ObservationData(BoundaryTrace):
    """Time-resolved boundary observations ``G``."""


def _boundary_interpolation(src: SimplicialMesh, dst: SimplicialMesh):
    """Sparse matrix mapping src boundary-node values to dst boundary nodes (P1 on faces)."""
    d = src.dim
    bpos = -np.ones(src.n_vertices, dtype=int)
    bpos[src.boundary_nodes] = np.arange(len(src.boundary_nodes))
    xs = src.vertices
    pts = dst.vertices[dst.boundary_nodes]
    rows, cols, vals = [], [], []
    found = np.zeros(len(pts), dtype=bool)
    scale = float(np.max(src.bounds[1] - src.bounds[0]))
    for tag in range(2 * d):
        axis, side = divmod(tag, 2)
        plane = src.bounds[side][axis]
        faces = src.faces[src.boundary_tag == tag]
        sel = np.flatnonzero(~found & (np.abs(pts[:, axis] - plane) <= 1e-12 * scale))
        if len(sel) == 0 or len(faces) == 0:
            continue
        keep = [a for a in range(d) if a != axis]
        fx = xs[faces][:, :, keep]  # (nf, d, d-1)
        jac = np.transpose(fx[:, 1:, :] - fx[:, :1, :], (0, 2, 1))
        inv = np.linalg.inv(jac)
        p = pts[sel][:, keep]
        rel = p[:, None, :] - fx[None, :, 0, :]
        b = np.einsum("fij,pfj->pfi", inv, rel)
        full = np.concatenate([1 - b.sum(axis=2, keepdims=True), b], axis=2)
        score = full.min(axis=2)
        best = score.argmax(axis=1)
        ok = score[np.arange(len(sel)), best] >= -1e-9
        for n, (pi, f) in enumerate(zip(sel, best)):
            if not ok[n]:
                continue
            bc = np.clip(full[n, f], 0.0, 1.0)
            bc /= bc.sum()
            for vtx, w in zip(faces[f], bc):
                if w > 0:
                    rows.append(pi)
                    cols.append(bpos[vtx])
                    vals.append(w)
            found[pi] = True
    if not np.all(found):
        raise UsageError("target boundary nodes not covered by the source boundary")
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(pts), len(src.boundary_nodes)))


# -- time matrices ---------------------------------------------------------------------

def time_matrices(grid: TimeGrid):
    """Exact mass and stiffness matrices of the P1 hat functions in time, (N + 1)^2 each."""
    N, tau = grid.n_steps, grid.tau
    theta, w = gauss_interval(2)
    hat = np.stack([1 - theta, theta])  # (2, ng)
    dhat = np.array([-1.0, 1.0]) / tau
    loc_m = tau * np.einsum("g,ig,jg->ij", w, hat, hat)
    loc_s = tau * np.outer(dhat, dhat)
    Tm = np.zeros((N + 1, N + 1))
    Ts = np.zeros((N + 1, N + 1))
    for k in range(N):
        Tm[k:k + 2, k:k + 2] += loc_m
        Ts[k:k + 2, k:k + 2] += loc_s
    return Tm, Ts


def weighted_time_mass(grid: TimeGrid, weight, npts: int = 8):
    """``W[k, l] = int weight(t) hat_k(t) hat_l(t) dt`` by Gauss quadrature per interval."""
    N, tau = grid.n_steps, grid.tau
    theta, w = gauss_interval(npts)
    W = np.zeros((N + 1, N + 1))
    for k in range(N):
        t = grid.nodes[k] + theta * tau
        z = np.asarray(weight(t), dtype=float) * np.ones_like(t)
        hat = np.stack([1 - theta, theta])
        W[k:k + 2, k:k + 2] += tau * np.einsum("g,g,ig,jg->ij", w, z, hat, hat)
    return W


# -- spatial assembly ----------------------------------------------------------------------

class Assembler:
    """Cached geometric data and sparse assembly on one mesh.

    Cell integrals use a rule of degree ``eps_degree + 2`` so that
    ``eps * phi_i * phi_j`` is integrated exactly; the rational factors
    ``1/eps`` in the coupling are integrated with the same rule.
    """

    def __init__(self, mesh: SimplicialMesh, eps_degree: int = 1):
        self.mesh = mesh
        self.eps_degree = eps_degree
        self.qbary, self.qw = simplex_rule(mesh.dim, eps_degree + 2)
        self.phi = shape_values(1, self.qbary)  # (nq, d+1)
        nc, nl = mesh.cells.shape
        self._rows = np.repeat(mesh.cells, nl, axis=1).ravel()
        self._cols = np.tile(mesh.cells, (1, nl)).ravel()
        g = mesh.grad_bary
        kloc = mesh.volumes[:, None, None] * np.einsum("cia,cja->cij", g, g)
        nv = mesh.n_vertices
        self.stiffness = sp.csr_matrix((kloc.ravel(), (self._rows, self._cols)), shape=(nv, nv))
        self.boundary_mass = self._boundary_mass()
        d = mesh.dim
        self.stiffness_vec = sp.kron(sp.identity(d), self.stiffness, format="csr")
        self.boundary_mass_vec = sp.kron(sp.identity(d), self.boundary_mass, format="csr")

    def _boundary_mass(self):
        mesh = self.mesh
        m = mesh.dim - 1  # face dimension
        bf = mesh.boundary_faces
        verts = mesh.faces[bf]
        meas = np.array([mesh.face_measure(f) for f in bf])
        base = (np.ones((m + 1, m + 1)) + np.eye(m + 1)) / ((m + 1) * (m + 2))
        loc = meas[:, None, None] * base[None]
        nl = m + 1
        rows = np.repeat(verts, nl, axis=1).ravel()
        cols = np.tile(verts, (1, nl)).ravel()
        nv = mesh.n_vertices
        return sp.csr_matrix((loc.ravel(), (rows, cols)), shape=(nv, nv))

    def eps_at_quad(self, eps: ScalarField):
        if eps.mesh is not self.mesh:
            raise UsageError("permittivity lives on a different mesh")
        return eps.at(self.qbary), eps.grad_at(self.qbary)

    def mass(self, eps: ScalarField | None = None):
        """Scalar mass matrix weighted by ``eps`` (unweighted when None)."""
        mesh = self.mesh
        if eps is None:
            epsq = np.ones((mesh.n_cells, len(self.qw)))
        else:
            epsq, _ = self.eps_at_quad(eps)
        loc = np.einsum("c,q,cq,qi,qj->cij", mesh.volumes, self.qw, epsq, self.phi, self.phi)
        nv = mesh.n_vertices
        return sp.csr_matrix((loc.ravel(), (self._rows, self._cols)), shape=(nv, nv))

    def coupling(self, eps: ScalarField):
        """Vector matrix of ``<(grad eps . E)/eps, div phi>`` with component-major dofs."""
        mesh = self.mesh
        epsq, geps = self.eps_at_quad(eps)
        ratio = geps / epsq[..., None]  # (nc, nq, d)
        nv, d = mesh.n_vertices, mesh.dim
        g = mesh.grad_bary
        # loc[c, a, i, b, j] = vol * sum_q w (d_b eps / eps) phi_j d_a phi_i
        loc = np.einsum("c,q,cqb,qj,cia->caibj", mesh.volumes, self.qw, ratio, self.phi, g)
        if not np.any(loc):
            return sp.csr_matrix((d * nv, d * nv))
        cells = mesh.cells
        nc, nl = cells.shape
        comp = np.arange(d)
        row = (comp[None, :, None, None, None] * nv + cells[:, None, :, None, None])
        col = (comp[None, None, None, :, None] * nv + cells[:, None, None, None, :])
        row = np.broadcast_to(row, loc.shape).ravel()
        col = np.broadcast_to(col, loc.shape).ravel()
        return sp.csr_matrix((loc.ravel(), (row, col)), shape=(d * nv, d * nv))


def to_vec(a):
    """(nv, d) nodal array -> component-major vector."""
    return np.ascontiguousarray(a.T).ravel()


def from_vec(v, nv, d):
    return v.reshape(d, nv).T


class WaveOperator:
    """Spatial operators for one coefficient plus the cached step factorization."""

    def __init__(self, eps: ScalarField, grid: TimeGrid, assembler: Assembler | None = None):
        mesh = eps.mesh
        self.eps = eps
        self.grid = grid
        self.asm = assembler if assembler is not None and assembler.mesh is mesh else Assembler(mesh, eps.degree)
        d = mesh.dim
        self.M = sp.kron(sp.identity(d), self.asm.mass(eps), format="csr")
        self.C = self.asm.coupling(eps)
        self.S = (self.asm.stiffness_vec + self.C).tocsr()
        tau = grid.tau
        self.A = (self.M / tau + (tau / 6.0) * self.S).tocsc()
        self.B = (2.0 / tau) * self.M - (2.0 * tau / 3.0) * self.S
        self.digest = eps_digest(eps)
        self.stable_step = check_time_step(mesh, grid)
        self._lu = None

    @property
    def lu(self):
        if self._lu is None:
            try:
                self._lu = spla.splu(self.A)
            except RuntimeError as exc:  # singular factor
                raise SolverError(f"time-step matrix is singular: {exc}") from exc
        return self._lu


_OP_CACHE: dict = {}
_OP_CACHE_SIZE = 4


def wave_operator(eps: ScalarField, grid: TimeGrid, assembler=None) -> WaveOperator:
    key = (eps_digest(eps), grid)
    op = _OP_CACHE.get(key)
    if op is None:
        op = WaveOperator(eps, grid, assembler)
        if len(_OP_CACHE) >= _OP_CACHE_SIZE:
            _OP_CACHE.pop(next(iter(_OP_CACHE)))
        _OP_CACHE[key] = op
    return op


def _check_finite(x, what):
    if not np.all(np.isfinite(x)):
        raise SolverError(f"{what} produced non-finite values")


def boundary_load(op: WaveOperator, P: BoundaryTrace):
    """``b_k = int <P, hat_k psi>_Gamma dt`` for every time node, (N + 1, d*nv)."""
    Tm, _ = time_matrices(op.grid)
    Pv = np.stack([to_vec(p) for p in P.full()])
    return Tm @ (op.asm.boundary_mass_vec @ Pv.T).T


def _step_solver(op: WaveOperator, rtol, transpose=False):
    """Solve with the per-step matrix A (or its transpose): direct LU, or Jacobi-GMRES to ``rtol``."""
    if rtol is None:
        lu = op.lu
        trans = "T" if transpose else "N"
        return lambda rhs, guess: lu.solve(rhs, trans=trans)
    A = (op.A.T if transpose else op.A).tocsr()
    jacobi = spla.LinearOperator(A.shape, matvec=lambda v, dinv=1.0 / A.diagonal(): dinv * v)

    def solve(rhs, guess):
        x, info = spla.gmres(A, rhs, x0=guess, rtol=rtol, atol=0.0, restart=60, maxiter=200, M=jacobi)
        if info != 0:
            raise SolverError(f"GMRES did not reach rtol={rtol} (info={info})")
        return x

    return solve


def direct_solve(eps: ScalarField, P: BoundaryTrace, grid: TimeGrid | None = None,
                 op: WaveOperator | None = None, rtol: float | None = None) -> SpaceTimeField:
    """Discrete direct problem: ``E_h`` in the direct space with D(eps, E_h, phi_h) = 0.

    With ``rtol`` the time steps are solved iteratively to that relative
    residual instead of by the cached LU factorization.
    """
    grid = P.grid if grid is None else grid
    if P.mesh is not eps.mesh or P.grid != grid:
        raise UsageError("Neumann data and permittivity live on different spaces")
    op = wave_operator(eps, grid) if op is None else op
    mesh = eps.mesh
    nv, d, N = mesh.n_vertices, mesh.dim, grid.n_steps
    b = boundary_load(op, P)
    E = np.zeros((N + 1, d * nv))
    solve = _step_solver(op, rtol)
    E[1] = solve(b[0], None)
    for k in range(1, N):
        E[k + 1] = solve(b[k] + op.B @ E[k] - op.A @ E[k - 1], E[k])
    _check_finite(E, "direct solve")
    values = np.stack([from_vec(e, nv, d) for e in E])
    values[0] = 0.0
    return SpaceTimeField(mesh, grid, values, "dir", meta={"eps_digest": op.digest})


def misfit_source(E: SpaceTimeField, G: BoundaryTrace, z, asm: Assembler):
    """Dual vectors ``int <(E - G) z^2, hat_k psi>_Gamma dt``, (N + 1, d*nv)."""
    W = weighted_time_mass(E.grid, lambda t: np.asarray(z(t)) ** 2)
    diff = E.values.copy()
    diff[:, E.mesh.boundary_nodes, :] -= G.values
    R = np.stack([to_vec(x) for x in diff])
    return W @ (asm.boundary_mass_vec @ R.T).T


def adjoint_solve(eps: ScalarField, E: SpaceTimeField, G: BoundaryTrace, z,
                  op: WaveOperator | None = None, rtol: float | None = None) -> SpaceTimeField:
    """Discrete adjoint problem: ``lambda_h`` in the adjoint space with A(eps, lambda_h, phi_h) = 0."""
    check_same_spaces(eps, E)
    if G.mesh is not E.mesh or G.grid != E.grid:
        raise UsageError("observations and field live on different spaces")
    grid = E.grid
    op = wave_operator(eps, grid) if op is None else op
    mesh = eps.mesh
    nv, d, N = mesh.n_vertices, mesh.dim, grid.n_steps
    g = misfit_source(E, G, z, op.asm)
    lam = np.zeros((N + 1, d * nv))
    solve = _step_solver(op, rtol, transpose=True)
    lam[N - 1] = solve(-g[N], None)
    At, Bt = op.A.T, op.B.T
    for k in range(N - 1, 0, -1):
        lam[k - 1] = solve(-g[k] + Bt @ lam[k] - At @ lam[k + 1], lam[k])
    _check_finite(lam, "adjoint solve")
    values = np.stack([from_vec(v, nv, d) for v in lam])
    values[-1] = 0.0
    return SpaceTimeField(mesh, grid, values, "adj", meta={"eps_digest": op.digest})


# -- weak forms ---------------------------------------------------------------------------

def _stack_vec(field: SpaceTimeField):
    return np.stack([to_vec(v) for v in field.values])


def direct_residual(eps: ScalarField, E: SpaceTimeField, P: BoundaryTrace | None = None, op=None):
    """``D(eps, E, psi_j hat_k)`` for every space-time basis function, as (N + 1, nv, d).

    Row ``k = N`` corresponds to a test function outside the adjoint space and
    is reported for completeness only. Also returns a magnitude scale made of
    the largest individual terms.
    """
    check_same_spaces(eps, E)
    op = wave_operator(eps, E.grid) if op is None else op
    Tm, Ts = time_matrices(E.grid)
    Ev = _stack_vec(E)
    time_term = -Ts @ (op.M @ Ev.T).T
    space_term = Tm @ (op.S @ Ev.T).T
    load = boundary_load(op, P) if P is not None else np.zeros_like(Ev)
    R = time_term + space_term - load
    scale = max(np.abs(time_term).max(), np.abs(space_term).max(), np.abs(load).max(), 1e-300)
    nv, d = E.mesh.n_vertices, E.mesh.dim
    return np.stack([from_vec(r, nv, d) for r in R]), scale


def adjoint_residual(eps: ScalarField, lam: SpaceTimeField, E: SpaceTimeField, G: BoundaryTrace, z, op=None):
    """``A(eps, lambda, psi_j hat_k)`` for every space-time basis function, plus a scale."""
    check_same_spaces(eps, lam, E)
    op = wave_operator(eps, lam.grid) if op is None else op
    Tm, Ts = time_matrices(lam.grid)
    Lv = _stack_vec(lam)
    time_term = -Ts @ (op.M @ Lv.T).T
    space_term = Tm @ (op.S.T @ Lv.T).T
    src = misfit_source(E, G, z, op.asm)
    R = src + time_term + space_term
    scale = max(np.abs(time_term).max(), np.abs(space_term).max(), np.abs(src).max(), 1e-300)
    nv, d = lam.mesh.n_vertices, lam.mesh.dim
    return np.stack([from_vec(r, nv, d) for r in R]), scale


def weak_form_D(eps: ScalarField, E: SpaceTimeField, phi: SpaceTimeField, P: BoundaryTrace | None = None):
    """Evaluate D(eps, E, phi); ``phi`` must vanish at t = T and ``E`` at t = 0."""
    check_same_spaces(eps, E, phi)
    if np.any(phi.values[-1] != 0):
        raise UsageError("test function must vanish at t = T")
    if np.any(E.values[0] != 0):
        raise UsageError("field must vanish at t = 0")
    R, _ = direct_residual(eps, E, P)
    return float(np.sum(R * phi.values))


def weak_form_A(eps: ScalarField, lam: SpaceTimeField, phi: SpaceTimeField, E: SpaceTimeField, G: BoundaryTrace, z):
    """Evaluate A(eps, lambda, phi); ``phi`` must vanish at t = 0 and ``lambda`` at t = T."""
    check_same_spaces(eps, lam, phi, E)
    if np.any(phi.values[0] != 0):
        raise UsageError("test function must vanish at t = 0")
    if np.any(lam.values[-1] != 0):
        raise UsageError("multiplier must vanish at t = T")
    R, _ = adjoint_residual(eps, lam, E, G, z)
    return float(np.sum(R * phi.values))
