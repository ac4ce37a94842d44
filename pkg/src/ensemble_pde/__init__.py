"""Density-level mapping and coverage control for stochastic robot ensembles."""

__version__ = "0.1.0"

from .grid import Grid, build_grid, gaussian_density, integrate_field, partition_targets
from .macroscopic import (ControlSignal, NumericalFailure, PhysicalParams, solve_adjoint,
                          solve_coverage_model, solve_mapping_model, stable_dt)
from .mapping import MappingProblem, SnapshotBasis, apply_K, apply_K_adjoint, solve_inverse, threshold
from .coverage import CoverageProblem, coverage_gradient, optimize_coverage, reduced_objective
from .microscopic import SimConfig, simulate_ensemble

__all__ = [
    "Grid", "build_grid", "gaussian_density", "integrate_field", "partition_targets",
    "ControlSignal", "NumericalFailure", "PhysicalParams", "solve_adjoint", "solve_coverage_model",
    "solve_mapping_model", "stable_dt", "MappingProblem", "SnapshotBasis", "apply_K", "apply_K_adjoint",
    "solve_inverse", "threshold", "CoverageProblem", "coverage_gradient", "optimize_coverage",
    "reduced_objective", "SimConfig", "simulate_ensemble",
]
