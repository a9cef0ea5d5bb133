"""Sources, target coefficients and synthetic boundary observations."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..mesh import SimplicialMesh, TimeGrid, make_time_grid, refine_uniform
from ..objective import PermittivityField, collar_mask
from ..pde import NeumannData, ObservationData, direct_solve
from ..quadrature import simplex_rule
from ..spaces import ScalarField, ScalarSpace, interpolate, physical_points
from .config import side_names

COLLAR_TOL = 1e-2


@dataclass(frozen=True)
class PulseSource:
    """Plane pulse ``amplitude * profile(t) * direction`` on one side of the box."""

    side: str = "top"
    direction: tuple = (1.0,)
    profile: str = "sine"
    frequency: float = 1.0
    amplitude: float = 1.0

    def temporal(self, t):
        t = np.asarray(t, dtype=float)
        f = self.frequency
        if self.profile == "sine":
            return np.where((t >= 0) & (t <= 1.0 / f), np.sin(2 * np.pi * f * t), 0.0)
        if self.profile == "ricker":
            a = (np.pi * f * (t - 1.0 / f)) ** 2
            return (1 - 2 * a) * np.exp(-a)
        raise ConfigError(f"unknown pulse profile {self.profile!r}")

    def neumann(self, mesh: SimplicialMesh, grid: TimeGrid) -> NeumannData:
        tag = side_names(mesh.dim)[self.side]
        on_side = np.zeros(mesh.n_vertices, dtype=bool)
        on_side[np.unique(mesh.faces[mesh.boundary_tag == tag])] = True
        mask = on_side[mesh.boundary_nodes]
        d = np.zeros(mesh.dim)
        direction = np.asarray(self.direction, dtype=float)
        d[: len(direction)] = direction
        values = self.amplitude * self.temporal(grid.nodes)[:, None, None] * mask[None, :, None] * d
        return NeumannData(mesh, grid, values)


@dataclass(frozen=True)
class GaussianInclusion:
    """``1 + amplitude * exp(-|x - center|^2 / (2 width^2))``."""

    center: tuple
    width: float = 0.1
    amplitude: float = 1.0

    def __call__(self, x):
        r2 = np.sum((np.asarray(x) - np.asarray(self.center)) ** 2, axis=-1)
        return 1.0 + self.amplitude * np.exp(-r2 / (2 * self.width**2))

    def bounding_box(self, lower, upper):
        c = np.asarray(self.center)
        return np.maximum(c - 2 * self.width, lower), np.minimum(c + 2 * self.width, upper)


def true_permittivity(mesh, target, eps_max, degree=1) -> PermittivityField:
    """Interpolate the target and pin the boundary collar to 1.

    Raises ``ConfigError`` if the target leaves ``[1, eps_max]`` or deviates
    from 1 in the collar by more than ``COLLAR_TOL``.
    """
    eps = interpolate(target, ScalarSpace(mesh, degree))
    v = eps.values
    if v.min() < 1 - 1e-12 or v.max() > eps_max + 1e-12:
        raise ConfigError(f"target coefficient leaves [1, {eps_max}]")
    collar = collar_mask(mesh, degree)
    if np.any(np.abs(v[collar] - 1) > COLLAR_TOL):
        raise ConfigError("target coefficient is not 1 near the boundary")
    v = np.clip(v, 1.0, eps_max)
    v[collar] = 1.0
    return PermittivityField(mesh, v, degree, eps_max, collar)


def relative_l2_error(eps: ScalarField, target, degree: int = 6) -> float:
    """``||eps - target|| / ||target||`` in L2 of the mesh domain, by quadrature of ``degree``."""
    bary, w = simplex_rule(eps.mesh.dim, degree)
    wvol = eps.mesh.volumes[:, None] * w[None, :]
    exact = target(physical_points(eps.mesh, bary))
    return float(np.sqrt(np.sum(wvol * (eps.at(bary) - exact) ** 2) / np.sum(wvol * exact**2)))


@dataclass
class SyntheticData:
    G: ObservationData            # on the reconstruction mesh and grid
    master: ObservationData       # noisy trace on the synthesis mesh and grid
    eps_true: PermittivityField   # on the synthesis mesh


def generate_synthetic_data(target, source: PulseSource, mesh: SimplicialMesh, grid: TimeGrid,
                            fine_factor: int = 2, sigma: float = 0.0, seed: int = 0,
                            eps_max: float = 15.0, degree: int = 1) -> SyntheticData:
    """Solve on a finer mesh and grid, add seeded relative noise, resample to ``(mesh, grid)``.

    Noise is multiplicative and componentwise, ``G (1 + sigma xi)`` with
    standard normal ``xi``, applied once to the fine trace.
    """
    if fine_factor < 1 or fine_factor & (fine_factor - 1):
        raise ConfigError("fine_factor must be a power of two")
    if sigma < 0:
        raise ConfigError("noise level must be nonnegative")
    sweeps = mesh.dim * int(round(math.log2(fine_factor)))
    fine = refine_uniform(mesh, sweeps) if sweeps else mesh
    fine_grid = make_time_grid(grid.T, grid.n_steps * fine_factor)
    eps_true = true_permittivity(fine, target, eps_max, degree)
    E = direct_solve(eps_true, source.neumann(fine, fine_grid))
    clean = ObservationData.from_field(E)
    rng = np.random.default_rng(seed)
    noisy = clean.values * (1.0 + sigma * rng.standard_normal(clean.values.shape))
    master = ObservationData(fine, fine_grid, noisy)
    return SyntheticData(master.resample(mesh, grid), master, eps_true)
