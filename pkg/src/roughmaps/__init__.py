"""Harmonic maps with rough boundary data: half-space solver and box perturbation theory."""

from .box import BoxField, BoxGrid, PerturbationProblem, StableBase, solve_perturbation
from .data import generate_boundary_data
from .geometry import TargetManifold, curvature_term
from .halfspace import BoundaryData, Field, HalfSpaceGrid, newton_potential, poisson_extend
from .norms import NormReport, bmo_norm, x_norm, y_norm
from .solver import IterationTrace, SolverOptions, solve

__version__ = "0.1.0"

__all__ = [
    "BoundaryData",
    "BoxField",
    "BoxGrid",
    "Field",
    "HalfSpaceGrid",
    "IterationTrace",
    "NormReport",
    "PerturbationProblem",
    "SolverOptions",
    "StableBase",
    "TargetManifold",
    "bmo_norm",
    "curvature_term",
    "generate_boundary_data",
    "newton_potential",
    "poisson_extend",
    "solve",
    "solve_perturbation",
    "x_norm",
    "y_norm",
]
