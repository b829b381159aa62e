"""Fully discrete multistep scheme marching backward from the terminal time.

At every time level the Z field is computed explicitly,

    z^i = (E_1[Z^{i+1}] + sum_{j>=1} gz_j E_j[f^{i+j} dW] - sum_{j>=1} gz_j E_j[Z^{i+j}]) / gz_0,

then the Y field from the implicit relation

    y^i = E_{K_y}[Y^{i+K_y}] + h K_y sum_{j>=0} gy_j E_j[f^{i+j}],

solved node by node with Newton's method. ``E_j`` is the Gauss-Hermite
expectation over a Brownian increment of length ``j h`` applied to the spline
interpolant of a stored level.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .field import (EXTRAPOLATION_MODES, GaussianSmoother, SolutionLevel, SpaceGrid,
                    build_grid, dx_from_h, interpolate)
from .problems import BSDEProblem
from .quadrature import gauss_hermite
from .weights import default_kind, derive_y_weights, derive_z_weights

__all__ = ["SolverConfig", "SolveResult", "NewtonError", "solve", "bootstrap",
           "step_z", "step_y", "resolve_q", "march"]

BOOTSTRAP_MODES = ("rampup", "fine", "analytic")
# substeps per coarse step for the startup levels, times sqrt(n_t)
AUTO_SUBSTEPS_1D = 8.0
AUTO_SUBSTEPS_ND = 3.0
F_EVAL_MODES = ("auto", "pointwise", "nodal")


class NewtonError(RuntimeError):
    """Newton iteration for the implicit Y update failed to converge."""


@dataclass(frozen=True)
class SolverConfig:
    """Scheme parameters.

    ``bootstrap`` selects how the ``K - 1`` levels below the terminal one are
    produced:

    * ``"rampup"``: one-step, two-step, ... schemes in turn, each using every
      level computed so far. With ``substeps > 1`` the ramp-up runs on the
      time step ``h / substeps`` and continues with the full scheme until the
      coarse startup levels are reached. ``refine_bootstrap_grid`` then runs
      it on the space grid coupled to ``h / substeps`` and samples the result
      on the coarse nodes.
    * ``"fine"``: the one-step scheme with step ``h / substeps``.
    * ``"analytic"``: the closed-form solution, when the problem has one.

    ``f_eval="pointwise"`` applies the generator to interpolated ``(y, z)`` at
    each quadrature point; ``"nodal"`` interpolates the generator values
    stored at the nodes; ``"auto"`` is pointwise in one dimension and nodal
    otherwise.
    """

    k_y: int
    k_z: int
    n_t: int
    L: int = 8
    bounds: tuple[float, float] = (-8.0, 8.0)
    q: int | None = None
    k2_variant: str = "quadratic"
    newton_tol: float = 1e-12
    newton_max_iter: int = 30
    bootstrap: str = "rampup"
    substeps: int | None = None
    extrapolation: str = "polynomial"
    f_eval: str = "auto"
    refine_bootstrap_grid: bool | None = None
    n_workers: int | None = None

    def __post_init__(self) -> None:
        for name in ("k_y", "k_z", "n_t", "L", "newton_max_iter", "substeps"):
            value = getattr(self, name)
            if value is None and name == "substeps":
                continue
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if self.n_t < max(self.k_y, self.k_z):
            raise ValueError(f"n_t={self.n_t} is smaller than max(k_y, k_z)={max(self.k_y, self.k_z)}")
        if self.q is not None and (not isinstance(self.q, (int, np.integer)) or self.q < 1):
            raise ValueError(f"q must be a positive integer or None, got {self.q!r}")
        if not self.newton_tol > 0:
            raise ValueError("newton_tol must be positive")
        if self.bootstrap not in BOOTSTRAP_MODES:
            raise ValueError(f"bootstrap must be one of {BOOTSTRAP_MODES}, got {self.bootstrap!r}")
        if self.extrapolation not in EXTRAPOLATION_MODES:
            raise ValueError(f"extrapolation must be one of {EXTRAPOLATION_MODES}")
        if self.f_eval not in F_EVAL_MODES:
            raise ValueError(f"f_eval must be one of {F_EVAL_MODES}, got {self.f_eval!r}")
        lo, hi = self.bounds
        if not lo < hi:
            raise ValueError("bounds must be increasing")
        gauss_hermite(self.L)
        default_kind(2, self.k2_variant)

    @property
    def k(self) -> int:
        return max(self.k_y, self.k_z)

    def resolve_substeps(self, d: int) -> int:
        """Startup substeps; by default ``c * sqrt(n_t)`` so that the
        second-order startup error of Z is ``O(h^3)``."""
        if self.substeps is not None:
            return int(self.substeps)
        if self.k == 1 or self.bootstrap == "analytic":
            return 1
        c = AUTO_SUBSTEPS_1D if d == 1 else AUTO_SUBSTEPS_ND
        return int(math.ceil(c * math.sqrt(self.n_t)))

    def resolve_refine(self, d: int) -> bool:
        if self.refine_bootstrap_grid is not None:
            return bool(self.refine_bootstrap_grid)
        return d == 1


@dataclass
class SolveResult:
    y0: np.ndarray
    z0: np.ndarray
    level: SolutionLevel
    q: int
    h: float
    dx: float
    newton_iterations: int
    wall_time: float
    point: np.ndarray = field(default_factory=lambda: np.zeros(1))

    def errors(self, problem: BSDEProblem) -> tuple[float, float]:
        """``(|Y0 - y0|, |Z0 - z0|)`` against the analytic solution (max norm)."""
        if problem.analytic is None:
            raise ValueError(f"problem {problem.name!r} has no analytic solution")
        y, z = problem.analytic(0.0, problem.state(0.0, self.point[None, :]))
        return (float(np.max(np.abs(y[0] - self.y0))), float(np.max(np.abs(z[0] - self.z0))))

    def z_error_mean(self, problem: BSDEProblem) -> float:
        """Mean absolute Z error over the components (used for d > 1 reports)."""
        y, z = problem.analytic(0.0, problem.state(0.0, self.point[None, :]))
        return float(np.mean(np.abs(z[0] - self.z0)))


def resolve_q(config: SolverConfig, problem: BSDEProblem) -> int:
    if config.q is not None:
        return int(config.q)
    q = min(config.k_y + 1, config.k_z)
    return min(q, 4 if problem.z_independent else 3)


# --- expectations of one stored level ------------------------------------

@dataclass
class _Moments:
    """Conditional expectations of one level over one span, at every node."""

    y: np.ndarray          # (*shape, m)
    z: np.ndarray          # (*shape, m, d)
    f: np.ndarray          # (*shape, m)
    f_dw: np.ndarray       # (*shape, m, d)


class _Engine:
    def __init__(self, problem: BSDEProblem, grid: SpaceGrid, config: SolverConfig):
        self.problem = problem
        self.grid = grid
        self.config = config
        self.rule = gauss_hermite(config.L)
        self.smoother = GaussianSmoother(grid, self.rule, config.extrapolation, config.n_workers)
        mode = config.f_eval
        if mode == "auto":
            mode = "pointwise" if grid.dim == 1 else "nodal"
        if mode == "pointwise" and grid.dim != 1:
            raise ValueError("pointwise generator evaluation is implemented for d = 1 only")
        self.f_eval = mode
        self.nodes = grid.points().reshape(-1, grid.dim)
        self.newton_iterations = 0
        self._cache: dict[tuple[int, float], _Moments] = {}

    # generator on flat arrays
    def _f(self, t: float, w: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = self.problem.state(t, w)
        out = np.asarray(self.problem.generator(t, x, y, z), dtype=float)
        return out.reshape(y.shape)

    def nodal_f(self, level: SolutionLevel) -> np.ndarray:
        if level.f is None:
            m, d = level.m, self.grid.dim
            f = self._f(level.t, self.nodes, level.y.reshape(-1, m), level.z.reshape(-1, m, d))
            level.f = f.reshape(self.grid.shape + (m,))
        return level.f

    def moments(self, level: SolutionLevel, span: float) -> _Moments:
        key = (id(level), span)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        if self.f_eval == "pointwise":
            mom = self._moments_pointwise(level, span)
        else:
            mom = self._moments_nodal(level, span)
        self._cache[key] = mom
        return mom

    def forget(self, keep: Sequence[SolutionLevel]) -> None:
        ids = {id(lv) for lv in keep}
        self._cache = {k: v for k, v in self._cache.items() if k[0] in ids}

    def _moments_nodal(self, level: SolutionLevel, span: float) -> _Moments:
        shape, m, d = self.grid.shape, level.m, self.grid.dim
        f = self.nodal_f(level)
        stacked = np.concatenate([level.y, level.z.reshape(shape + (m * d,)), f], axis=-1)
        mean, f_dw = self.smoother.expect(stacked, span, increments=True,
                                          inc_channels=slice(m + m * d, None))
        return _Moments(mean[..., :m], mean[..., m:m + m * d].reshape(shape + (m, d)),
                        mean[..., m + m * d:], f_dw)

    def _moments_pointwise(self, level: SolutionLevel, span: float) -> _Moments:
        m = level.m
        axis = self.grid.axes[0]
        shift = math.sqrt(2.0 * span) * self.rule.nodes
        pts = axis[None, :] + shift[:, None]
        if self.config.extrapolation == "clamp":
            pts = np.clip(pts, self.grid.lower[0], self.grid.upper[0])
        flat = pts.reshape(-1, 1)
        interp = level.interpolant(self.config.extrapolation)
        vals = interp(flat)
        y = vals[:, :m]
        z = vals[:, m:].reshape(-1, m, 1)
        # the state map takes unclipped Brownian coordinates
        w_true = (axis[None, :] + shift[:, None]).reshape(-1, 1)
        f = self._f(level.t, w_true, y, z)
        L, n = self.rule.order, axis.size
        stacked = np.concatenate([y, z.reshape(-1, m), f], axis=-1).reshape(L, n, -1)
        w = self.rule.weights / math.sqrt(math.pi)
        wd = w * shift
        mean = w[0] * stacked[0]
        inc = wd[0] * stacked[0, :, 2 * m:]
        for lam in range(1, L):
            mean = mean + w[lam] * stacked[lam]
            inc = inc + wd[lam] * stacked[lam, :, 2 * m:]
        return _Moments(mean[:, :m], mean[:, m:2 * m].reshape(n, m, 1), mean[:, 2 * m:],
                        inc.reshape(n, m, 1))


# --- single-level updates --------------------------------------------------

def step_z(engine: _Engine, ahead: Sequence[SolutionLevel], h: float, gamma_z: Sequence[float]) -> np.ndarray:
    """Z field at the new level. ``ahead[j - 1]`` is the level ``j`` steps later."""
    k_z = len(gamma_z) - 1
    if len(ahead) < k_z:
        raise ValueError(f"need {k_z} levels ahead, got {len(ahead)}")
    acc = engine.moments(ahead[0], h).z.copy()
    for j in range(1, k_z + 1):
        mom = engine.moments(ahead[j - 1], j * h)
        acc += gamma_z[j] * (mom.f_dw - mom.z)
    return acc / gamma_z[0]


def step_y(engine: _Engine, ahead: Sequence[SolutionLevel], h: float, gamma_y: Sequence[float],
           t: float, z: np.ndarray) -> np.ndarray:
    """Y field at the new level (time ``t``) given its Z field."""
    k_y = len(gamma_y) - 1
    if len(ahead) < k_y:
        raise ValueError(f"need {k_y} levels ahead, got {len(ahead)}")
    cfg = engine.config
    base = engine.moments(ahead[k_y - 1], k_y * h).y.copy()
    explicit = base.copy()
    for j in range(1, k_y + 1):
        explicit += h * k_y * gamma_y[j] * engine.moments(ahead[j - 1], j * h).f
    c = h * k_y * gamma_y[0]
    m, d = base.shape[-1], engine.grid.dim
    a = explicit.reshape(-1, m)
    zz = z.reshape(-1, m, d)
    w = engine.nodes
    if c == 0:
        return explicit

    def residual(y, sel):
        return y - a[sel] - c * engine._f(t, w[sel], y, zz[sel])

    # explicit predictor
    y = a + c * engine._f(t, w, base.reshape(-1, m), zz)
    active = np.arange(y.shape[0])
    r = residual(y, active)
    scale = np.maximum(1.0, np.abs(a))
    done = np.all(np.abs(r) <= cfg.newton_tol * scale, axis=1)
    active = active[~done]
    r = r[~done]
    it = 0
    while active.size:
        if it >= cfg.newton_max_iter:
            worst = active[np.argmax(np.max(np.abs(r), axis=1))]
            raise NewtonError(
                f"Newton did not converge at t={t:.6g}, node {tuple(w[worst])}, "
                f"residual {np.max(np.abs(r)):.3e} after {it} iterations")
        it += 1
        ya = y[active]
        jac = np.empty((active.size, m, m))
        for k in range(m):
            step = 1e-6 * (1.0 + np.abs(ya[:, k]))
            yp, ym = ya.copy(), ya.copy()
            yp[:, k] += step
            ym[:, k] -= step
            jac[:, :, k] = (residual(yp, active) - residual(ym, active)) / (2 * step)[:, None]
        if m == 1:
            delta = r[:, 0] / jac[:, 0, 0]
            y[active, 0] = ya[:, 0] - delta
        else:
            y[active] = ya - np.linalg.solve(jac, r[..., None])[..., 0]
        r = residual(y[active], active)
        ok = np.all(np.abs(r) <= cfg.newton_tol * scale[active], axis=1)
        if not np.all(np.isfinite(y[active])):
            raise NewtonError(f"Newton produced non-finite values at t={t:.6g}")
        active, r = active[~ok], r[~ok]
    engine.newton_iterations = max(engine.newton_iterations, it)
    return y.reshape(base.shape)


def _advance(engine: _Engine, ahead: Sequence[SolutionLevel], h: float, k_y: int, k_z: int,
             index: int, t: float, weights: dict) -> SolutionLevel:
    gy = weights[("y", k_y)]
    gz = weights[("z", k_z)]
    z = step_z(engine, ahead, h, gz)
    y = step_y(engine, ahead, h, gy, t, z)
    return SolutionLevel(index, t, engine.grid, y, z)


def _weights(config: SolverConfig, k_max: int) -> dict:
    out = {}
    for k in range(1, k_max + 1):
        kind = default_kind(k, config.k2_variant)
        out[("y", k)] = derive_y_weights(k, kind).as_floats()
        out[("z", k)] = derive_z_weights(k, 1, kind).as_floats()
    return out


def _terminal_level(problem: BSDEProblem, grid: SpaceGrid, index: int) -> SolutionLevel:
    T = problem.T
    nodes = grid.points().reshape(-1, grid.dim)
    x = problem.state(T, nodes)
    y = np.asarray(problem.terminal(x), dtype=float).reshape(-1, problem.m)
    if problem.terminal_z is not None:
        z = np.asarray(problem.terminal_z(x), dtype=float).reshape(-1, problem.m, grid.dim)
    else:
        z = _spline_gradient(grid, y.reshape(grid.shape + (problem.m,)))
    return SolutionLevel(index, T, grid, y.reshape(grid.shape + (problem.m,)),
                         z.reshape(grid.shape + (problem.m, grid.dim)))


def _spline_gradient(grid: SpaceGrid, values: np.ndarray) -> np.ndarray:
    from scipy.interpolate import CubicSpline

    parts = []
    for ax in range(grid.dim):
        sp = CubicSpline(grid.axes[ax], values, axis=ax, bc_type="not-a-knot")
        parts.append(sp(grid.axes[ax], 1))
    return np.stack(parts, axis=-1)


def _analytic_level(problem: BSDEProblem, grid: SpaceGrid, index: int, t: float) -> SolutionLevel:
    if problem.analytic is None:
        raise ValueError(f"problem {problem.name!r} has no analytic solution for bootstrapping")
    nodes = grid.points().reshape(-1, grid.dim)
    y, z = problem.analytic(t, problem.state(t, nodes))
    return SolutionLevel(index, t, grid, np.asarray(y, float).reshape(grid.shape + (problem.m,)),
                         np.asarray(z, float).reshape(grid.shape + (problem.m, grid.dim)))


def march(engine: _Engine, levels: list[SolutionLevel], h: float, k_y: int, k_z: int,
          stop_index: int, weights: dict, ramp: bool = False, skip_last: int = 0,
          retain: frozenset = frozenset()) -> list[SolutionLevel]:
    """Extend ``levels`` (newest last, descending time) down to ``stop_index``.

    With ``ramp`` the step counts grow with the number of available levels.
    ``skip_last`` excludes that many of the oldest levels from every stencil.
    Levels no longer needed by the stencil are dropped unless their index is
    in ``retain``; the levels passed in are always kept.
    """
    k = max(k_y, k_z)
    levels = list(levels)
    pinned = {id(lv) for lv in levels}
    window = k + skip_last
    while levels[-1].index > stop_index:
        usable = len(levels) - skip_last
        ky, kz = (min(k_y, usable), min(k_z, usable)) if ramp else (k_y, k_z)
        need = max(ky, kz)
        if usable < need:
            raise ValueError(f"only {usable} levels available for a {need}-step update")
        ahead = levels[::-1][:need]
        index = levels[-1].index - 1
        t = levels[-1].t - h
        if abs(t) < 1e-14 * max(1.0, h):
            t = 0.0
        levels.append(_advance(engine, ahead, h, ky, kz, index, t, weights))
        recent = levels[-window:]
        levels = [lv for lv in levels[:-window]
                  if id(lv) in pinned or lv.index in retain] + recent
        engine.forget(levels[-k:])
    return levels


def _fine_grid(problem: BSDEProblem, config: SolverConfig, grid: SpaceGrid, substeps: int) -> SpaceGrid:
    if substeps == 1 or not config.resolve_refine(problem.d):
        return grid
    # interpolation errors add up over the k * substeps fine steps
    fine_dx = grid.dx[0] * (config.k * substeps) ** -0.25
    fine = build_grid(problem.d, config.bounds, fine_dx)
    return fine if fine.n_nodes > grid.n_nodes else grid


def _restrict(level: SolutionLevel, grid: SpaceGrid, index: int, t: float,
              extrapolation: str) -> SolutionLevel:
    """``level`` sampled on the nodes of ``grid``."""
    if level.grid is grid:
        return SolutionLevel(index, t, grid, level.y, level.z, level.f)
    nodes = grid.points().reshape(-1, grid.dim)
    y, z = level.interpolant(extrapolation).split(nodes, level.m)
    return SolutionLevel(index, t, grid, y.reshape(grid.shape + (level.m,)),
                         z.reshape(grid.shape + (level.m, grid.dim)))


def bootstrap(problem: BSDEProblem, config: SolverConfig, grid: SpaceGrid | None = None,
              engine: _Engine | None = None) -> list[SolutionLevel]:
    """Terminal level and the ``K - 1`` startup levels, newest last."""
    h = problem.T / config.n_t
    if grid is None:
        grid = build_grid(problem.d, config.bounds, dx_from_h(h, resolve_q(config, problem)))
        problem = problem.for_grid(grid)
    n, k = config.n_t, config.k
    terminal = _terminal_level(problem, grid, n)
    if k == 1:
        return [terminal]
    mode = config.bootstrap
    if mode == "analytic":
        return [terminal] + [_analytic_level(problem, grid, n - j, problem.T - j * h)
                             for j in range(1, k)]
    s = config.resolve_substeps(problem.d)
    fine_h = h / s
    fine_grid = _fine_grid(problem, config, grid, s)
    if engine is None or fine_grid is not grid:
        engine = _Engine(problem, fine_grid, config)
    if mode == "fine":
        k_y, k_z, ramp = 1, 1, False
        weights = _weights(config, 1)
    else:
        k_y, k_z, ramp = config.k_y, config.k_z, True
        weights = _weights(config, k)
    start = _terminal_level(problem, fine_grid, n * s)
    wanted = frozenset((n - j) * s for j in range(1, k))
    fine = march(engine, [start], fine_h, k_y, k_z, (n - k + 1) * s, weights, ramp=ramp,
                 retain=wanted)
    by_index = {lv.index: lv for lv in fine}
    out = [terminal]
    for j in range(1, k):
        out.append(_restrict(by_index[(n - j) * s], grid, n - j, problem.T - j * h,
                             config.extrapolation))
    return out


def solve(problem: BSDEProblem, config: SolverConfig) -> SolveResult:
    start = time.perf_counter()
    q = resolve_q(config, problem)
    h = problem.T / config.n_t
    grid = build_grid(problem.d, config.bounds, dx_from_h(h, q))
    problem = problem.for_grid(grid)
    engine = _Engine(problem, grid, config)
    levels = bootstrap(problem, config, grid, engine)
    weights = _weights(config, config.k)
    k = config.k
    if problem.drop_terminal and k > 1:
        # first full-length update without the terminal data, then the K-step
        # scheme on levels that never touch it
        levels = march(engine, levels, h, min(config.k_y, k - 1), min(config.k_z, k - 1),
                       config.n_t - k, weights, skip_last=1)
        levels = levels[1:]
    engine.forget(levels[-k:])
    levels = march(engine, levels, h, config.k_y, config.k_z, 0, weights)
    final = levels[-1]
    point = np.zeros(problem.d)
    y0, z0 = interpolate(final.interpolant(config.extrapolation), point)
    return SolveResult(y0=y0, z0=z0, level=final, q=q, h=h, dx=grid.dx[0],
                       newton_iterations=engine.newton_iterations,
                       wall_time=time.perf_counter() - start, point=point)
