"""Legacy ASCII VTK output, CSV logs and boundary-trace files.

Floats are written with ``repr`` so identical states give identical bytes.
"""
from __future__ import annotations

import csv
import os
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from ..mesh import SimplicialMesh, TimeGrid
from ..pde import ObservationData

VTK_CELL_TYPE = {2: 5, 3: 10}  # triangle, tetrahedron


def _num(x) -> str:
    return repr(float(x))


def _open(path, mode="w"):
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        return open(path, mode, encoding="utf-8", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def _as_vectors(a, dim):
    a = np.asarray(a, dtype=float)
    if a.ndim == 2 and a.shape[1] == dim and dim < 3:
        a = np.hstack([a, np.zeros((len(a), 3 - dim))])
    return a


def write_vtk(path, mesh: SimplicialMesh, point_data=None, cell_data=None, title="epsrecon"):
    """Unstructured grid with scalar or vector point/cell arrays (2D points get z = 0)."""
    pts = np.hstack([mesh.vertices, np.zeros((mesh.n_vertices, 3 - mesh.dim))])
    lines = ["# vtk DataFile Version 3.0", title, "ASCII", "DATASET UNSTRUCTURED_GRID"]
    lines.append(f"POINTS {mesh.n_vertices} double")
    lines.extend(" ".join(_num(v) for v in p) for p in pts)
    nl = mesh.dim + 1
    lines.append(f"CELLS {mesh.n_cells} {mesh.n_cells * (nl + 1)}")
    lines.extend(f"{nl} " + " ".join(str(int(i)) for i in c) for c in mesh.cells)
    lines.append(f"CELL_TYPES {mesh.n_cells}")
    lines.extend([str(VTK_CELL_TYPE[mesh.dim])] * mesh.n_cells)
    for header, n, data in (("POINT_DATA", mesh.n_vertices, point_data), ("CELL_DATA", mesh.n_cells, cell_data)):
        if not data:
            continue
        lines.append(f"{header} {n}")
        for name, arr in data.items():
            arr = _as_vectors(arr, mesh.dim)
            if arr.shape[0] != n:
                raise ValueError(f"array {name!r} has {arr.shape[0]} rows, expected {n}")
            if arr.ndim == 1:
                lines.append(f"SCALARS {name} double 1")
                lines.append("LOOKUP_TABLE default")
                lines.extend(_num(v) for v in arr)
            else:
                lines.append(f"VECTORS {name} double")
                lines.extend(" ".join(_num(v) for v in row) for row in arr)
    with _open(path) as fh:
        fh.write("\n".join(lines) + "\n")
    return str(path)


def write_vtk_series(directory, stem, mesh, grid: TimeGrid, values, name):
    """One file per time node plus a ``.series`` index listing file and time."""
    directory = Path(directory)
    files = []
    for k, t in enumerate(grid.nodes):
        files.append(write_vtk(directory / f"{stem}_{k:05d}.vtk", mesh, point_data={name: values[k]},
                               title=f"{name} t={_num(t)}"))
    index = directory / f"{stem}.series.csv"
    write_csv(index, ["k", "t", "file"], [[k, _num(t), os.path.basename(f)] for k, t, f in
                                          zip(range(len(files)), grid.nodes, files)])
    return files, str(index)


def write_csv(path, header, rows):
    with _open(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return str(path)


def append_csv(path, header, row):
    new = not Path(path).exists()
    with _open(path, "a") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(header)
        w.writerow([_num(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return str(path)


ITERATION_HEADER = ["iteration", "F", "misfit", "regularization", "grad_norm", "step"]


def write_iteration_log(path, records):
    return write_csv(path, ITERATION_HEADER,
                     [[r.iteration, r.F, r.misfit, r.regularization, r.grad_norm, r.step] for r in records])


def trace_header(dim):
    return ["face", "node", "k", "t"] + [f"x{i}" for i in range(dim)] + [f"c{i}" for i in range(dim)]


def write_trace_csv(path, trace: ObservationData):
    """Boundary trace table: one row per boundary node and time node."""
    mesh, grid = trace.mesh, trace.grid
    first_face = {}
    for f in mesh.boundary_faces:
        for n in mesh.faces[f]:
            first_face.setdefault(int(n), int(f))
    rows = []
    for k, t in enumerate(grid.nodes):
        for j, n in enumerate(mesh.boundary_nodes):
            rows.append([first_face[int(n)], int(n), k, float(t), *map(float, mesh.vertices[n]),
                         *map(float, trace.values[k, j])])
    return write_csv(path, trace_header(mesh.dim), rows)


def read_trace_csv(path, mesh: SimplicialMesh, grid: TimeGrid, cls=ObservationData):
    """Read a trace table written for ``(mesh, grid)``; every boundary node and time node must be present."""
    d = mesh.dim
    pos = {int(n): j for j, n in enumerate(mesh.boundary_nodes)}
    values = np.full((grid.n_steps + 1, len(pos), d), np.nan)
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != trace_header(d):
                raise ConfigError(f"{path}: unexpected header {header}")
            for lineno, row in enumerate(reader, start=2):
                node, k = int(row[1]), int(row[2])
                if node not in pos or not 0 <= k <= grid.n_steps:
                    raise ConfigError(f"{path}: node {node} / step {k} not in the layout", lineno)
                values[k, pos[node]] = [float(v) for v in row[4 + d: 4 + 2 * d]]
    except OSError as exc:
        raise ConfigError(f"cannot read observations {path}: {exc}") from exc
    if np.isnan(values).any():
        raise ConfigError(f"{path}: trace table is incomplete for this mesh and grid")
    return cls(mesh, grid, values)


def write_manifest(path, entries):
    """``entries`` is a list of (file, quantity) pairs; paths are stored relative to the manifest."""
    base = Path(path).parent
    rows = [[os.path.relpath(f, base), q] for f, q in entries]
    return write_csv(path, ["file", "quantity"], rows)
