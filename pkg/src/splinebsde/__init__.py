"""Multistep BSDE solver built on cubic-spline time integration and Gauss-Hermite quadrature."""
from .weights import SplineKind, derive_y_weights, derive_z_weights
from .stability import analyze, characteristic_polynomial, polynomial_roots
from .quadrature import gauss_hermite, tensor_rule, conditional_expectation
from .field import SpaceGrid, SolutionLevel, build_grid, dx_from_h
from .problems import BSDEProblem, make_problem
from .solver import SolverConfig, SolveResult, solve
from .estimator import MultistepBSDESolver
from .convergence import ExperimentSpec, fit_rate, run_experiment

__all__ = [
    "SplineKind", "derive_y_weights", "derive_z_weights",
    "analyze", "characteristic_polynomial", "polynomial_roots",
    "gauss_hermite", "tensor_rule", "conditional_expectation",
    "SpaceGrid", "SolutionLevel", "build_grid", "dx_from_h",
    "BSDEProblem", "make_problem",
    "SolverConfig", "SolveResult", "solve",
    "MultistepBSDESolver", "ExperimentSpec", "fit_rate", "run_experiment",
]

__version__ = "0.1.0"
