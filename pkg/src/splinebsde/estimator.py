"""scikit-learn style front end to the solver."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .problems import BSDEProblem, make_problem
from .solver import SolverConfig, solve

__all__ = ["MultistepBSDESolver"]


class MultistepBSDESolver(BaseEstimator):
    """Solve a BSDE backward to ``t = 0`` and evaluate the initial fields.

    ``fit`` takes a :class:`~splinebsde.problems.BSDEProblem` or a registered
    problem name. ``predict(X)`` returns ``y(0, x)`` and ``predict_z(X)``
    returns ``z(0, x)`` at Brownian coordinates ``X`` of shape ``(n, d)``
    (for geometric Brownian motion the asset value is the state map of ``X``).
    """

    def __init__(self, k_y: int = 1, k_z: int = 1, n_t: int = 8, L: int = 8, q=None,
                 k2_variant: str = "quadratic", bootstrap: str = "rampup", substeps=None,
                 extrapolation: str = "polynomial", f_eval: str = "auto",
                 bounds=(-8.0, 8.0), n_workers=None):
        self.k_y = k_y
        self.k_z = k_z
        self.n_t = n_t
        self.L = L
        self.q = q
        self.k2_variant = k2_variant
        self.bootstrap = bootstrap
        self.substeps = substeps
        self.extrapolation = extrapolation
        self.f_eval = f_eval
        self.bounds = bounds
        self.n_workers = n_workers

    def _config(self) -> SolverConfig:
        return SolverConfig(
            k_y=self.k_y, k_z=self.k_z, n_t=self.n_t, L=self.L, q=self.q,
            k2_variant=self.k2_variant, bootstrap=self.bootstrap, substeps=self.substeps,
            extrapolation=self.extrapolation, f_eval=self.f_eval,
            bounds=tuple(self.bounds), n_workers=self.n_workers)

    def fit(self, problem: BSDEProblem | str, y=None, **problem_params):
        if isinstance(problem, str):
            problem = make_problem(problem, **problem_params)
        elif problem_params:
            raise ValueError("problem parameters are only accepted with a problem name")
        if not isinstance(problem, BSDEProblem):
            raise TypeError(f"expected a BSDEProblem or a problem name, got {type(problem).__name__}")
        result = solve(problem, self._config())
        self.problem_ = problem
        self.result_ = result
        self.level_ = result.level
        self.y0_ = result.y0
        self.z0_ = result.z0
        self.n_features_in_ = problem.d
        return self

    def _eval(self, X):
        check_is_fitted(self, "level_")
        X = check_array(X, dtype=float, ensure_2d=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} columns, the problem has d={self.n_features_in_}")
        return self.level_.interpolant(self.extrapolation).split(X, self.level_.m)

    def predict(self, X) -> np.ndarray:
        """``y(0, x)`` with shape ``(n,)`` for scalar BSDEs, else ``(n, m)``."""
        y, _ = self._eval(X)
        return y[:, 0] if y.shape[1] == 1 else y

    def predict_z(self, X) -> np.ndarray:
        """``z(0, x)`` with shape ``(n, m, d)``."""
        _, z = self._eval(X)
        return z

    def errors(self) -> tuple[float, float]:
        """``(|Y0 - y0|, |Z0 - z0|)`` against the analytic solution."""
        check_is_fitted(self, "result_")
        return self.result_.errors(self.problem_)
