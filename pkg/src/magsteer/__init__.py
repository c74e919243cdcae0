"""Magnetic dipole control design and drift-diffusion steering."""

from magsteer.magnetics import (
    CircleCurve,
    Dipole,
    DipoleConfig,
    FieldSample,
    ProximityError,
    b_matrices,
    eval_field,
    g_matrices,
)
from magsteer.domain import MovingDomain, QuadratureRule, TargetField, disk_quadrature
from magsteer.objective import ControlTrajectory, ObjectiveConfig, TrackingProblem
from magsteer.optimize import BoxBounds, OptimizerSettings, init_horizon, minimize, project
from magsteer.fem import TriMesh, assemble_mass, assemble_stiffness, generate_mesh, lumped_mass
from magsteer.transport import ControlledDrift, TransportSettings, assemble_eafe, run

__version__ = "0.1.0"

__all__ = [
    "BoxBounds",
    "CircleCurve",
    "ControlTrajectory",
    "ControlledDrift",
    "Dipole",
    "DipoleConfig",
    "FieldSample",
    "MovingDomain",
    "ObjectiveConfig",
    "OptimizerSettings",
    "ProximityError",
    "QuadratureRule",
    "TargetField",
    "TrackingProblem",
    "TransportSettings",
    "TriMesh",
    "assemble_eafe",
    "assemble_mass",
    "assemble_stiffness",
    "b_matrices",
    "disk_quadrature",
    "eval_field",
    "g_matrices",
    "generate_mesh",
    "init_horizon",
    "lumped_mass",
    "minimize",
    "project",
    "run",
]
