"""Simplicial box meshes, conforming bisection refinement and time grids."""
from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass
from itertools import combinations, permutations

import numpy as np

from .errors import CFLWarning, ConfigError

_GEOM_TOL = 1e-12


def _frozen(a):
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


class SimplicialMesh:
    """Conforming simplicial mesh of an axis-aligned box in 2 or 3 dimensions.

    Parameters
    ----------
    vertices : (nv, d) array
    order : (nc, d + 1) int array
        Vertex tuples in bisection order; the refinement edge of cell ``c`` is
        ``(order[c, 0], order[c, tag[c]])``.
    tags : (nc,) int array
        Bisection tags in ``1..d``.
    bounds : (lower, upper)
        Corners of the box the mesh covers.

    The mesh is immutable. ``cells`` holds the same tuples as ``order`` but
    permuted to positive orientation.
    """

    def __init__(self, vertices, order, tags, bounds, parent=None, generation=None):
        vertices = np.asarray(vertices, dtype=float)
        order = np.asarray(order, dtype=np.int64)
        self.dim = vertices.shape[1]
        if self.dim not in (2, 3):
            raise ConfigError(f"dimension must be 2 or 3, got {self.dim}")
        if order.shape[1] != self.dim + 1:
            raise ConfigError("cells must have d + 1 vertices")
        lower, upper = (np.asarray(b, dtype=float) for b in bounds)
        self.bounds = (_frozen(lower), _frozen(upper))
        self.vertices = _frozen(vertices)
        self.order = _frozen(order)
        self.tags = _frozen(np.asarray(tags, dtype=np.int64))
        nc = len(order)
        self.parent = _frozen(np.full(nc, -1) if parent is None else np.asarray(parent))
        self.generation = _frozen(
            np.zeros(nc, dtype=np.int64) if generation is None else np.asarray(generation)
        )

        jac = self._jacobians(order)
        det = np.linalg.det(jac)
        cells = order.copy()
        neg = det < 0
        cells[neg, -2], cells[neg, -1] = order[neg, -1], order[neg, -2]
        self.cells = _frozen(cells)
        self.volumes = _frozen(np.abs(det) / math.factorial(self.dim))
        self._build_geometry()
        self._build_faces()
        self._build_edges()

    # -- construction helpers -------------------------------------------------
    def _jacobians(self, cells):
        x = self.vertices[cells]
        return np.transpose(x[:, 1:, :] - x[:, :1, :], (0, 2, 1))

    def _build_geometry(self):
        jac = self._jacobians(self.cells)
        inv = np.linalg.inv(jac)  # rows are gradients of barycentric coords 1..d
        grad = np.empty((len(self.cells), self.dim + 1, self.dim))
        grad[:, 1:, :] = inv
        grad[:, 0, :] = -inv.sum(axis=1)
        self.grad_bary = _frozen(grad)
        x = self.vertices[self.cells]
        diam = np.zeros(len(self.cells))
        for i, j in combinations(range(self.dim + 1), 2):
            diam = np.maximum(diam, np.linalg.norm(x[:, i] - x[:, j], axis=1))
        self.diameters = _frozen(diam)

    def _build_faces(self):
        nc, nl = self.cells.shape
        local = np.empty((nc, nl, nl - 1), dtype=np.int64)
        for i in range(nl):
            local[:, i, :] = np.delete(self.cells, i, axis=1)
        keys = np.sort(local.reshape(-1, nl - 1), axis=1)
        faces, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.ravel()
        nf = len(faces)
        counts = np.bincount(inverse, minlength=nf)
        if counts.max() > 2:
            raise ConfigError("non-manifold mesh: a face has more than two cells")
        face_cells = np.full((nf, 2), -1, dtype=np.int64)
        face_local = np.full((nf, 2), -1, dtype=np.int64)
        slot = np.zeros(nf, dtype=np.int64)
        for flat, f in enumerate(inverse):
            c, i = divmod(flat, nl)
            face_cells[f, slot[f]] = c
            face_local[f, slot[f]] = i
            slot[f] += 1
        self.faces = _frozen(faces)
        self.face_cells = _frozen(face_cells)
        self.face_local = _frozen(face_local)
        self.cell_faces = _frozen(inverse.reshape(nc, nl))

        tag = np.full(nf, -1, dtype=np.int64)
        lower, upper = self.bounds
        scale = max(float(np.max(upper - lower)), 1.0)
        xf = self.vertices[faces]
        for axis in range(self.dim):
            for side, value in enumerate((lower[axis], upper[axis])):
                on = np.all(np.abs(xf[:, :, axis] - value) <= _GEOM_TOL * scale, axis=1)
                tag[on & (tag < 0)] = 2 * axis + side
        boundary = face_cells[:, 1] < 0
        if np.any(tag[boundary] < 0):
            raise ConfigError("mesh has a boundary face off the box boundary")
        tag[~boundary] = -1
        self.boundary_tag = _frozen(tag)
        self.boundary_faces = _frozen(np.flatnonzero(boundary))
        bnodes = np.unique(faces[boundary])
        self.boundary_nodes = _frozen(bnodes)
        mask = np.zeros(len(self.vertices), dtype=bool)
        mask[bnodes] = True
        self.boundary_node_mask = _frozen(mask)

        # outward unit normal of local face i is -grad(b_i)/|grad(b_i)|
        g = self.grad_bary
        self.normals = _frozen(-g / np.linalg.norm(g, axis=2, keepdims=True))
        # (d-1)-measure of local face i: d * vol / dist, dist = 1/|grad b_i|
        self.face_measures_local = _frozen(
            self.dim * self.volumes[:, None] * np.linalg.norm(g, axis=2)
        )

    def _build_edges(self):
        pairs = list(combinations(range(self.dim + 1), 2))
        keys = np.sort(self.cells[:, pairs].reshape(-1, 2), axis=1)
        edges, inverse = np.unique(keys, axis=0, return_inverse=True)
        self.local_edges = tuple(pairs)
        self.edges = _frozen(edges)
        self.cell_edges = _frozen(inverse.reshape(len(self.cells), len(pairs)))

    # -- queries ----------------------------------------------------------------
    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_cells(self):
        return len(self.cells)

    @property
    def n_faces(self):
        return len(self.faces)

    def face_measure(self, f):
        c, i = self.face_cells[f, 0], self.face_local[f, 0]
        return self.face_measures_local[c, i]

    def boundary_owner(self):
        """Owning cell and local face index of every boundary face."""
        bf = self.boundary_faces
        return self.face_cells[bf, 0], self.face_local[bf, 0]

    def neighbors(self, c):
        """Cells sharing a face with cell ``c``."""
        out = []
        for f in self.cell_faces[c]:
            a, b = self.face_cells[f]
            other = b if a == c else a
            if other >= 0:
                out.append(int(other))
        return out

    def signed_volumes(self):
        return np.linalg.det(self._jacobians(self.cells)) / math.factorial(self.dim)

    def domain_volume(self):
        lower, upper = self.bounds
        return float(np.prod(upper - lower))

    def is_conforming(self):
        """True when no vertex lies strictly inside an edge of some cell."""
        x = self.vertices
        for a, b in self.edges:
            seg = x[b] - x[a]
            L2 = seg @ seg
            t = (x - x[a]) @ seg / L2
            inside = (t > 1e-12) & (t < 1 - 1e-12)
            if not np.any(inside):
                continue
            dist = np.linalg.norm(x[inside] - (x[a] + np.outer(t[inside], seg)), axis=1)
            if np.any(dist < 1e-12 * math.sqrt(L2)):
                return False
        return True

    def __repr__(self):
        return f"SimplicialMesh(d={self.dim}, vertices={self.n_vertices}, cells={self.n_cells})"


def build_box_mesh(lower, upper, resolution, dim=None):
    """Kuhn triangulation of the box ``[lower, upper]``.

    Each of the ``prod(resolution)`` sub-boxes is split into ``d!`` simplices
    sharing the main diagonal, which is also their first refinement edge.
    """
    lower = np.atleast_1d(np.asarray(lower, dtype=float))
    upper = np.atleast_1d(np.asarray(upper, dtype=float))
    d = len(lower) if dim is None else int(dim)
    if d not in (2, 3):
        raise ConfigError(f"dimension must be 2 or 3, got {d}")
    if lower.shape != (d,) or upper.shape != (d,):
        raise ConfigError("bounds must have one entry per dimension")
    if np.any(upper <= lower):
        raise ConfigError("box bounds are degenerate")
    res = np.broadcast_to(np.asarray(resolution), (d,)).astype(int)
    if np.any(np.asarray(resolution) < 1):
        raise ConfigError("resolution must be at least 1 per axis")

    axes = [np.linspace(lower[k], upper[k], res[k] + 1) for k in range(d)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, d)
    strides = np.array([int(np.prod(res[k + 1:] + 1)) for k in range(d)])

    order = []
    for corner in np.ndindex(*res):
        base = np.array(corner)
        for perm in permutations(range(d)):
            pt = base.copy()
            simplex = [int(pt @ strides)]
            for axis in perm:
                pt[axis] += 1
                simplex.append(int(pt @ strides))
            order.append(simplex)
    order = np.array(order, dtype=np.int64)
    return SimplicialMesh(grid, order, np.full(len(order), d), (lower, upper))


def _bisect(order, tag, z):
    """Maubach bisection of ``order`` along edge (x0, x_tag) with midpoint ``z``."""
    d = len(order) - 1
    x = list(order)
    k = tag
    child1 = x[:k] + [z] + x[k + 1:]
    child2 = x[1:k + 1] + [z] + x[k + 1:]
    new_tag = k - 1 if k > 1 else d
    return child1, child2, new_tag


def refine_marked(mesh: SimplicialMesh, marked) -> SimplicialMesh:
    """Bisect every marked cell and close the mesh to conformity.

    Cells holding an edge that was split elsewhere are bisected in turn until
    no hanging vertex remains. Returns a new mesh whose ``parent`` array maps
    every cell to the input cell it descends from.
    """
    marked = sorted({int(c) for c in np.atleast_1d(np.asarray(marked, dtype=np.int64))})
    if not marked:
        return mesh
    if marked[0] < 0 or marked[-1] >= mesh.n_cells:
        raise IndexError("marked cell index out of range")

    verts = [tuple(v) for v in mesh.vertices]
    recs = [
        [list(map(int, mesh.order[c])), int(mesh.tags[c]), c, int(mesh.generation[c]), True]
        for c in range(mesh.n_cells)
    ]
    d = mesh.dim
    pairs = list(combinations(range(d + 1), 2))

    def edge_keys(order):
        return [(min(order[i], order[j]), max(order[i], order[j])) for i, j in pairs]

    edge_cells = {}
    for cid, rec in enumerate(recs):
        for e in edge_keys(rec[0]):
            edge_cells.setdefault(e, set()).add(cid)
    midpoint = {}
    queue = deque(marked)
    queued = set(marked)

    while queue:
        cid = queue.popleft()
        queued.discard(cid)
        rec = recs[cid]
        if not rec[4]:
            continue
        order, tag = rec[0], rec[1]
        a, b = order[0], order[tag]
        key = (min(a, b), max(a, b))
        z = midpoint.get(key)
        if z is None:
            z = len(verts)
            verts.append(tuple((np.asarray(verts[a]) + np.asarray(verts[b])) / 2.0))
            midpoint[key] = z
            for other in sorted(edge_cells.get(key, ())):
                if other != cid and other not in queued:
                    queue.append(other)
                    queued.add(other)
        rec[4] = False
        for e in edge_keys(order):
            edge_cells[e].discard(cid)
        c1, c2, new_tag = _bisect(order, tag, z)
        for child in (c1, c2):
            nid = len(recs)
            recs.append([child, new_tag, rec[2], rec[3] + 1, True])
            hanging = False
            for e in edge_keys(child):
                edge_cells.setdefault(e, set()).add(nid)
                if e in midpoint:
                    hanging = True
            if hanging:
                queue.append(nid)
                queued.add(nid)

    alive = [r for r in recs if r[4]]
    return SimplicialMesh(
        np.array(verts),
        np.array([r[0] for r in alive]),
        np.array([r[1] for r in alive]),
        mesh.bounds,
        parent=np.array([r[2] for r in alive]),
        generation=np.array([r[3] for r in alive]),
    )


def refine_uniform(mesh: SimplicialMesh, times: int = 1) -> SimplicialMesh:
    """Bisect every cell ``times`` times; ``d`` sweeps halve the mesh size."""
    for _ in range(times):
        parent = mesh.parent
        mesh = refine_marked(mesh, np.arange(mesh.n_cells))
        # keep ancestry relative to the original input mesh
        mesh = SimplicialMesh(
            mesh.vertices, mesh.order, mesh.tags, mesh.bounds,
            parent=parent[mesh.parent] if parent.min() >= 0 else mesh.parent,
            generation=mesh.generation,
        )
    return mesh


def mesh_size_field(mesh: SimplicialMesh):
    """Cell diameters ``h(K)``, the largest vertex distance inside each cell."""
    return mesh.diameters


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition of ``[0, T]`` into ``n_steps`` intervals."""

    T: float
    n_steps: int

    @property
    def tau(self):
        return self.T / self.n_steps

    @property
    def nodes(self):
        return np.linspace(0.0, self.T, self.n_steps + 1)

    def refined(self, factor: int = 2):
        return TimeGrid(self.T, self.n_steps * factor)


def stable_time_step(mesh: SimplicialMesh, eps_min: float = 1.0) -> float:
    """Largest stable step of the time-stepping scheme for P1 fields and ``eps >= eps_min``.

    The scheme is stable for ``tau^2 lambda_max <= 12`` with ``lambda_max`` the
    largest eigenvalue of ``K v = lambda M v``; the elementwise eigenvalue bound
    makes the returned value a slight underestimate.
    """
    d = mesh.dim
    stiff = mesh.volumes[:, None, None] * np.einsum("cid,cjd->cij", mesh.grad_bary, mesh.grad_bary)
    mass = (np.ones((d + 1, d + 1)) + np.eye(d + 1)) / ((d + 1) * (d + 2))
    w, v = np.linalg.eigh(mass)
    m_isqrt = v @ np.diag(w**-0.5) @ v.T
    lam = np.linalg.eigvalsh(m_isqrt @ stiff @ m_isqrt / mesh.volumes[:, None, None]).max()
    return math.sqrt(12.0 * eps_min / lam)


def check_time_step(mesh: SimplicialMesh, grid: "TimeGrid", eps_min: float = 1.0):
    limit = stable_time_step(mesh, eps_min)
    if grid.tau > limit:
        warnings.warn(
            f"time step {grid.tau:.4g} exceeds the stability limit {limit:.4g} of this mesh",
            CFLWarning,
            stacklevel=3,
        )
    return limit


def make_time_grid(T, n_steps, h_min=None, eps_max=None) -> TimeGrid:
    """Build a uniform time grid; warns when ``tau > h_min / sqrt(eps_max)``."""
    if not (T > 0):
        raise ConfigError(f"final time must be positive, got {T}")
    if int(n_steps) != n_steps or n_steps < 1:
        raise ConfigError(f"number of time steps must be a positive integer, got {n_steps}")
    grid = TimeGrid(float(T), int(n_steps))
    if h_min is not None and eps_max is not None:
        limit = h_min / math.sqrt(eps_max)
        if grid.tau > limit:
            warnings.warn(
                f"time step {grid.tau:.4g} exceeds h_min/sqrt(eps_max) = {limit:.4g}",
                CFLWarning,
                stacklevel=2,
            )
    return grid
