"""Lagrange fields on a mesh and on mesh x time grid, plus jump operators."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .mesh import SimplicialMesh, TimeGrid


# -- reference-element helpers -------------------------------------------------

def n_local(dim, degree):
    return {1: dim + 1, 2: (dim + 1) * (dim + 2) // 2}[degree]


def lagrange_nodes(mesh: SimplicialMesh, degree: int):
    """Coordinates of the global Lagrange nodes: vertices, then edge midpoints for q=2."""
    if degree == 1:
        return mesh.vertices
    if degree == 2:
        mids = mesh.vertices[mesh.edges].mean(axis=1)
        return np.vstack([mesh.vertices, mids])
    raise UsageError(f"unsupported polynomial degree {degree}")


def cell_dofs(mesh: SimplicialMesh, degree: int):
    if degree == 1:
        return mesh.cells
    if degree == 2:
        return np.hstack([mesh.cells, mesh.n_vertices + mesh.cell_edges])
    raise UsageError(f"unsupported polynomial degree {degree}")


def shape_values(degree, bary):
    """Local basis values, shape (npts, nloc)."""
    bary = np.atleast_2d(bary)
    if degree == 1:
        return bary.copy()
    d1 = bary.shape[1]
    pairs = [(i, j) for i in range(d1) for j in range(i + 1, d1)]
    vert = bary * (2 * bary - 1)
    edge = np.stack([4 * bary[:, i] * bary[:, j] for i, j in pairs], axis=1)
    return np.hstack([vert, edge])


def shape_grads(mesh, degree, bary):
    """Physical gradients of local basis functions, shape (nc, npts, nloc, d)."""
    bary = np.atleast_2d(bary)
    g = mesh.grad_bary  # (nc, d+1, d)
    npts = len(bary)
    if degree == 1:
        return np.broadcast_to(g[:, None, :, :], (len(g), npts) + g.shape[1:])
    d1 = bary.shape[1]
    pairs = [(i, j) for i in range(d1) for j in range(i + 1, d1)]
    vert = (4 * bary - 1)[None, :, :, None] * g[:, None, :, :]
    edge = np.stack(
        [4 * (bary[None, :, j, None] * g[:, None, i, :] + bary[None, :, i, None] * g[:, None, j, :])
         for i, j in pairs],
        axis=2,
    )
    return np.concatenate([vert, edge], axis=2)


def shape_hessians(mesh, degree):
    """Hessians of local basis functions, shape (nc, nloc, d, d); zero for q=1."""
    g = mesh.grad_bary
    nc, d1, d = g.shape
    if degree == 1:
        return np.zeros((nc, d1, d, d))
    pairs = [(i, j) for i in range(d1) for j in range(i + 1, d1)]
    vert = 4 * np.einsum("cia,cib->ciab", g, g)
    edge = np.stack(
        [4 * (np.einsum("ca,cb->cab", g[:, i], g[:, j]) + np.einsum("ca,cb->cab", g[:, j], g[:, i]))
         for i, j in pairs],
        axis=1,
    )
    return np.concatenate([vert, edge], axis=1)


def face_midpoint_bary(dim):
    """Barycentric coordinates of the midpoint of local face ``i`` (row ``i``)."""
    b = np.full((dim + 1, dim + 1), 1.0 / dim)
    np.fill_diagonal(b, 0.0)
    return b


def physical_points(mesh, bary):
    """Physical coordinates of barycentric points in every cell, shape (nc, npts, d)."""
    return np.einsum("pi,cid->cpd", np.atleast_2d(bary), mesh.vertices[mesh.cells])


# -- spaces and fields -----------------------------------------------------------

@dataclass(frozen=True)
class ScalarSpace:
    mesh: SimplicialMesh
    degree: int = 1


@dataclass(frozen=True)
class SpaceTimeSpace:
    """Vector P1 x P1 space; ``kind`` is ``"dir"`` (zero at t=0), ``"adj"`` (zero at t=T) or None."""

    mesh: SimplicialMesh
    grid: TimeGrid
    kind: str | None = None


class ScalarField:
    """Continuous piecewise polynomial scalar of degree 1 or 2."""

    def __init__(self, mesh: SimplicialMesh, values, degree: int = 1):
        values = np.asarray(values, dtype=float)
        n = len(lagrange_nodes(mesh, degree))
        if values.shape != (n,):
            raise UsageError(f"expected {n} coefficients for degree {degree}, got {values.shape}")
        self.mesh = mesh
        self.degree = degree
        self.values = values

    @property
    def space(self):
        return ScalarSpace(self.mesh, self.degree)

    @property
    def dofs(self):
        return cell_dofs(self.mesh, self.degree)

    def local(self):
        return self.values[self.dofs]

    def at(self, bary):
        """Values at barycentric points in every cell, (nc, npts)."""
        return self.local() @ shape_values(self.degree, bary).T

    def grad_at(self, bary):
        """Gradients at barycentric points in every cell, (nc, npts, d)."""
        return np.einsum("cl,cpld->cpd", self.local(), shape_grads(self.mesh, self.degree, bary))

    def hessian(self):
        """Cellwise Hessian (the Jacobian of the gradient), (nc, d, d)."""
        return np.einsum("cl,clab->cab", self.local(), shape_hessians(self.mesh, self.degree))

    def vertex_values(self):
        return self.values[: self.mesh.n_vertices]

    def copy(self, values=None):
        return ScalarField(self.mesh, self.values.copy() if values is None else values, self.degree)


class SpaceTimeField:
    """Vector field, P1 in space and time; ``values`` has shape (N + 1, nv, d)."""

    def __init__(self, mesh: SimplicialMesh, grid: TimeGrid, values, kind=None, meta=None):
        values = np.asarray(values, dtype=float)
        shape = (grid.n_steps + 1, mesh.n_vertices, mesh.dim)
        if values.shape != shape:
            raise UsageError(f"expected values of shape {shape}, got {values.shape}")
        if kind == "dir" and np.any(values[0] != 0):
            raise UsageError("direct-space field must vanish at t = 0")
        if kind == "adj" and np.any(values[-1] != 0):
            raise UsageError("adjoint-space field must vanish at t = T")
        if kind not in (None, "dir", "adj"):
            raise UsageError(f"unknown space kind {kind!r}")
        self.mesh = mesh
        self.grid = grid
        self.values = values
        self.kind = kind
        self.meta = dict(meta or {})

    @property
    def space(self):
        return SpaceTimeSpace(self.mesh, self.grid, self.kind)

    @classmethod
    def zeros(cls, mesh, grid, kind=None):
        return cls(mesh, grid, np.zeros((grid.n_steps + 1, mesh.n_vertices, mesh.dim)), kind)

    def slopes(self):
        """Nodal time derivative on every interval, (N, nv, d)."""
        return np.diff(self.values, axis=0) / self.grid.tau

    def at_times(self, theta):
        """Nodal values at ``t_k + theta * tau`` for every interval k, (N, ntheta, nv, d)."""
        theta = np.atleast_1d(theta)
        v = self.values
        return (1 - theta)[None, :, None, None] * v[:-1, None] + theta[None, :, None, None] * v[1:, None]

    def jacobians(self):
        """Cellwise Jacobian ``J[i, j] = dE_i/dx_j`` at every time node, (N + 1, nc, d, d)."""
        local = self.values[:, self.mesh.cells, :]  # (N+1, nc, d+1, d)
        return np.einsum("kcli,clj->kcij", local, self.mesh.grad_bary)

    def divergence(self):
        """Cellwise divergence at every time node, (N + 1, nc)."""
        return np.einsum("kcii->kc", self.jacobians())

    def copy(self, values=None, kind="same"):
        return SpaceTimeField(
            self.mesh, self.grid,
            self.values.copy() if values is None else values,
            self.kind if kind == "same" else kind,
            self.meta,
        )


def check_same_spaces(*fields):
    """Raise ``UsageError`` unless all fields live on the same mesh (and time grid)."""
    meshes = {id(f.mesh) for f in fields if f is not None}
    if len(meshes) > 1:
        raise UsageError("fields live on different meshes")
    grids = {f.grid for f in fields if f is not None and hasattr(f, "grid")}
    if len(grids) > 1:
        raise UsageError("fields live on different time grids")


def interpolate(f, space):
    """Nodal interpolant of ``f`` into ``space``.

    For a :class:`ScalarSpace`, ``f(x)`` receives an (n, d) array of points.
    For a :class:`SpaceTimeSpace`, ``f(x, t)`` receives points and a scalar
    time and returns an (n, d) array. Constants are accepted as well.
    """
    if isinstance(space, ScalarSpace):
        pts = lagrange_nodes(space.mesh, space.degree)
        vals = f(pts) if callable(f) else np.full(len(pts), float(f))
        return ScalarField(space.mesh, np.broadcast_to(vals, (len(pts),)).astype(float), space.degree)
    if isinstance(space, SpaceTimeSpace):
        mesh, grid = space.mesh, space.grid
        pts = mesh.vertices
        out = np.empty((grid.n_steps + 1, mesh.n_vertices, mesh.dim))
        for k, t in enumerate(grid.nodes):
            out[k] = f(pts, t) if callable(f) else f
        if space.kind == "dir":
            if np.any(np.abs(out[0]) > 1e-14):
                raise UsageError("function does not vanish at t = 0")
            out[0] = 0.0
        if space.kind == "adj":
            if np.any(np.abs(out[-1]) > 1e-14):
                raise UsageError("function does not vanish at t = T")
            out[-1] = 0.0
        return SpaceTimeField(mesh, grid, out, space.kind)
    raise UsageError(f"cannot interpolate into {space!r}")


def evaluate_at_nodes(u: ScalarField, mesh: SimplicialMesh, degree: int = 1):
    """Evaluate ``u`` at the Lagrange nodes of another mesh by point location.

    Used to transfer fields between nested meshes; every node of the target
    must lie inside the source mesh.
    """
    return interpolate(lambda x: point_values(u, x), ScalarSpace(mesh, degree))


def locate_points(mesh: SimplicialMesh, x, tol=1e-10):
    """Cell index and barycentric coordinates of each point in ``x``."""
    x = np.atleast_2d(x)
    X0 = mesh.vertices[mesh.cells[:, 0]]
    g = mesh.grad_bary
    cell = np.full(len(x), -1)
    bary = np.zeros((len(x), mesh.dim + 1))
    # chunked brute force; meshes here are desk scale
    for start in range(0, len(x), 256):
        xs = x[start:start + 256]
        rel = xs[:, None, :] - X0[None, :, :]
        b = np.einsum("pcd,cid->pci", rel, g[:, 1:, :])
        b0 = 1.0 - b.sum(axis=2)
        full = np.concatenate([b0[..., None], b], axis=2)
        score = full.min(axis=2)
        best = score.argmax(axis=1)
        ok = score[np.arange(len(xs)), best] >= -tol
        if not np.all(ok):
            raise UsageError("point outside the mesh")
        cell[start:start + len(xs)] = best
        bary[start:start + len(xs)] = full[np.arange(len(xs)), best]
    return cell, bary


def point_values(u: ScalarField, x):
    cell, bary = locate_points(u.mesh, x)
    phi = shape_values(u.degree, bary)  # (n, nloc)
    return np.einsum("nl,nl->n", u.local()[cell], phi)


# -- jumps -------------------------------------------------------------------------

def normal_traces(mesh: SimplicialMesh, q):
    """Contract the last axis of a cellwise quantity with each local outward normal.

    ``q`` has shape (nc, ..., d); the result has shape (nc, d + 1, ...), the
    trace ``q . nu`` seen from each cell on each of its faces.
    """
    q = np.asarray(q)
    return np.einsum("c...a,cia->ci...", q, mesh.normals)


def face_sample_bary(mesh: SimplicialMesh):
    """Barycentric coordinates of the jump sample points on every local face.

    Returns (nc, d + 1, d + 1, d + 1): for local face ``i`` of cell ``c`` the
    face vertices in increasing global order followed by the face centroid.
    Both cells sharing a face list the same physical points in the same order.
    """
    nc, nl = mesh.cells.shape
    fverts = mesh.faces[mesh.cell_faces]  # (nc, nl, nl - 1) global ids
    pos = np.argmax(fverts[..., None] == mesh.cells[:, None, None, :], axis=-1)
    out = np.zeros((nc, nl, nl, nl))
    eye = np.eye(nl)
    out[:, :, : nl - 1, :] = eye[pos]
    out[:, :, nl - 1, :] = eye[pos].mean(axis=2)
    return out


def spatial_max_jump(traces, mesh: SimplicialMesh, sampled: bool = False):
    """Cellwise maximal jump ``max_{face of K} |[v]_s|``.

    ``traces[c, i, ...]`` is the limit of the jumped quantity from cell ``c``
    on its local face ``i``; with ``sampled=True`` axis 2 runs over the points
    of :func:`face_sample_bary` and the maximum is also taken over them. The
    jump on an interior face is the sum of the two one-sided traces
    (quantities carrying the outward normal thus give the normal jump);
    boundary faces contribute zero. For vector quantities the maximum is taken
    componentwise, so the result has the trailing shape of ``traces``.
    """
    traces = np.asarray(traces, dtype=float)
    nc = mesh.n_cells
    if traces.shape[:2] != (nc, mesh.dim + 1):
        raise UsageError("traces must have shape (n_cells, d + 1, ...)")
    if sampled and (traces.ndim < 3 or traces.shape[2] != mesh.dim + 1):
        raise UsageError("sampled traces must have shape (n_cells, d + 1, d + 1, ...)")
    fc, fl = mesh.face_cells, mesh.face_local
    interior = fc[:, 1] >= 0
    jumps = np.zeros((mesh.n_faces,) + traces.shape[2:])
    jumps[interior] = traces[fc[interior, 0], fl[interior, 0]] + traces[fc[interior, 1], fl[interior, 1]]
    per_face = np.abs(jumps)
    if sampled:
        per_face = per_face.max(axis=1)
    return per_face[mesh.cell_faces].max(axis=1)


def temporal_jumps(v):
    """Jumps ``v(t_k+) - v(t_k-)`` at all time nodes for piecewise-constant ``v`` of shape (N, ...)."""
    v = np.asarray(v, dtype=float)
    j = np.zeros((len(v) + 1,) + v.shape[1:])
    j[1:-1] = v[1:] - v[:-1]
    return j


def temporal_max_jump(v, grid: TimeGrid | None = None):
    """Intervalwise maximal time jump for ``v`` constant on each interval.

    ``v`` has shape (N, ...); the result on interval ``(t_k, t_{k+1})`` is the
    componentwise maximum of the absolute jumps at its two end nodes, with the
    jumps at ``t_0`` and ``t_N`` defined as zero.
    """
    v = np.asarray(v, dtype=float)
    if grid is not None and len(v) != grid.n_steps:
        raise UsageError("need one value per time interval")
    j = np.abs(temporal_jumps(v))
    return np.maximum(j[:-1], j[1:])


def eval_derivatives(u, what):
    """Exact elementwise derivatives of a discrete field.

    ScalarField: ``"grad"`` gives the gradient at the cell vertices,
    (nc, d + 1, d); ``"hess"`` gives the cellwise Jacobian of the gradient,
    (nc, d, d), identically zero for q = 1.
    SpaceTimeField: ``"grad"`` gives Jacobians at time nodes (N + 1, nc, d, d),
    ``"div"`` cellwise divergences (N + 1, nc) and ``"dt"`` nodal slopes per
    interval (N, nv, d).
    """
    if isinstance(u, ScalarField):
        if what == "grad":
            return u.grad_at(np.eye(u.mesh.dim + 1))
        if what == "hess":
            return u.hessian()
    elif isinstance(u, SpaceTimeField):
        if what == "grad":
            return u.jacobians()
        if what == "div":
            return u.divergence()
        if what == "dt":
            return u.slopes()
    raise UsageError(f"derivative {what!r} not available for {type(u).__name__}")
