"""Permittivity reconstruction from boundary wave data with a posteriori error estimation."""

from .errors import CFLWarning, ConfigError, ContractViolation, SolverError, UsageError
from .mesh import SimplicialMesh, TimeGrid, build_box_mesh, make_time_grid, refine_marked, refine_uniform
from .objective import (
    CutoffFunction,
    OptimizerOptions,
    PermittivityField,
    RegularizationConfig,
    grad_eps,
    lagrangian_value,
    minimize,
    project_admissible,
    tikhonov_value,
)
from .pde import NeumannData, ObservationData, adjoint_solve, direct_solve, weak_form_A, weak_form_D
from .spaces import ScalarField, ScalarSpace, SpaceTimeField, SpaceTimeSpace, interpolate

__version__ = "0.1.0"

__all__ = [
    "CFLWarning", "ConfigError", "ContractViolation", "SolverError", "UsageError",
    "SimplicialMesh", "TimeGrid", "build_box_mesh", "make_time_grid", "refine_marked", "refine_uniform",
    "CutoffFunction", "OptimizerOptions", "PermittivityField", "RegularizationConfig", "grad_eps",
    "lagrangian_value", "minimize", "project_admissible", "tikhonov_value",
    "NeumannData", "ObservationData", "adjoint_solve", "direct_solve", "weak_form_A", "weak_form_D",
    "ScalarField", "ScalarSpace", "SpaceTimeField", "SpaceTimeSpace", "interpolate",
]
