"""Uniform spatial grids, per-level fields and their spline interpolants.

Fields are stored as arrays whose leading axes follow the grid
(``grid.shape``) and whose trailing axes hold components. Off-grid values come
from not-a-knot cubic splines, tensorised axis by axis in more than one
dimension. Outside the grid the boundary pieces are continued as polynomials
(``extrapolation="polynomial"``) or the query is clamped to the boundary
(``extrapolation="clamp"``).
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import sparse
from scipy.interpolate import CubicSpline
from scipy.linalg import solve_banded

from .quadrature import HermiteRule, gauss_hermite

__all__ = [
    "SpaceGrid",
    "SolutionLevel",
    "FieldInterpolant",
    "GaussianSmoother",
    "build_grid",
    "dx_from_h",
    "interpolate",
    "write_level",
    "read_level",
    "resolve_workers",
    "not_a_knot_slopes",
]

EXTRAPOLATION_MODES = ("polynomial", "clamp")
WORKERS_ENV = "SPLINEBSDE_WORKERS"


def resolve_workers(n_workers: int | None = None) -> int:
    if n_workers is None:
        n_workers = int(os.environ.get(WORKERS_ENV, "1") or 1)
    return max(1, int(n_workers))


@dataclass(frozen=True, eq=False)
class SpaceGrid:
    axes: tuple[np.ndarray, ...]
    lower: tuple[float, ...]
    upper: tuple[float, ...]
    dx: tuple[float, ...]

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(a.size for a in self.axes)

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.shape))

    def points(self) -> np.ndarray:
        """Node coordinates, shape ``(*grid.shape, d)``."""
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack(mesh, axis=-1)


def build_grid(d: int = 1, bounds: Sequence = (-8.0, 8.0), dx_target: float = 0.125) -> SpaceGrid:
    """Uniform grid whose spacing is ``dx_target`` snapped to fit the bounds.

    ``bounds`` is one ``(lower, upper)`` pair shared by every axis, or one pair
    per axis.
    """
    if d < 1:
        raise ValueError(f"dimension must be positive, got {d}")
    if len(bounds) == 2 and np.ndim(bounds[0]) == 0:
        bounds = [tuple(bounds)] * d
    if len(bounds) != d:
        raise ValueError(f"expected {d} bound pairs, got {len(bounds)}")
    if not dx_target > 0 or not math.isfinite(dx_target):
        raise ValueError(f"dx_target must be positive and finite, got {dx_target}")
    axes, lows, ups, dxs = [], [], [], []
    for lo, hi in bounds:
        lo, hi = float(lo), float(hi)
        if not (math.isfinite(lo) and math.isfinite(hi)):
            raise ValueError("bounds must be finite")
        if not lo < hi:
            raise ValueError(f"lower bound {lo} must be below upper bound {hi}")
        width = hi - lo
        if dx_target > width:
            raise ValueError(f"dx_target={dx_target} exceeds the domain width {width}")
        n = max(4, int(round(width / dx_target)))
        axis = lo + width * (np.arange(n + 1) / n)
        axis[-1] = hi
        axes.append(axis)
        lows.append(lo)
        ups.append(hi)
        dxs.append(width / n)
    for a in axes:
        a.setflags(write=False)
    return SpaceGrid(tuple(axes), tuple(lows), tuple(ups), tuple(dxs))


def dx_from_h(h: float, q: int) -> float:
    """Space step with ``dx**4 == h**(q + 1)``."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    if q < 1:
        raise ValueError(f"q must be at least 1, got {q}")
    return float(h ** ((q + 1) / 4.0))


@dataclass(eq=False)
class SolutionLevel:
    """``(y, z)`` on the grid at time index ``index``.

    ``y`` has shape ``(*grid.shape, m)`` and ``z`` shape ``(*grid.shape, m, d)``.
    ``f`` optionally caches the generator evaluated at the nodes.
    """

    index: int
    t: float
    grid: SpaceGrid
    y: np.ndarray
    z: np.ndarray
    f: np.ndarray | None = None
    _interp: "FieldInterpolant | None" = field(default=None, repr=False)

    def __post_init__(self) -> None:
        shape = self.grid.shape
        if self.y.shape[:-1] != shape or self.z.shape[:-2] != shape:
            raise ValueError("field extents do not match the grid")
        if self.z.shape[-1] != self.grid.dim or self.z.shape[-2] != self.y.shape[-1]:
            raise ValueError("z must have shape (*grid, m, d)")
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.z))):
            raise FloatingPointError(f"non-finite values at time level {self.index}")

    @property
    def m(self) -> int:
        return self.y.shape[-1]

    def interpolant(self, extrapolation: str = "polynomial") -> "FieldInterpolant":
        if self._interp is None or self._interp.extrapolation != extrapolation:
            self._interp = FieldInterpolant.from_level(self, extrapolation)
        return self._interp


def _check_mode(extrapolation: str) -> str:
    if extrapolation not in EXTRAPOLATION_MODES:
        raise ValueError(f"extrapolation must be one of {EXTRAPOLATION_MODES}, got {extrapolation!r}")
    return extrapolation


def _axis_spline(axis: np.ndarray, values: np.ndarray, along: int) -> CubicSpline:
    return CubicSpline(axis, values, axis=along, bc_type="not-a-knot", extrapolate=True)


class FieldInterpolant:
    """Tensor-product not-a-knot spline of a stacked field.

    ``values`` has shape ``(*grid.shape, c)``; queries return ``(n_points, c)``.
    """

    def __init__(self, grid: SpaceGrid, values: np.ndarray, extrapolation: str = "polynomial",
                 level: SolutionLevel | None = None):
        values = np.asarray(values, dtype=float)
        if values.shape[: grid.dim] != grid.shape:
            raise ValueError("values do not match the grid")
        if values.ndim == grid.dim:
            values = values[..., None]
        self.grid = grid
        self.values = values.reshape(grid.shape + (-1,))
        self.extrapolation = _check_mode(extrapolation)
        self.level = level
        # spline along the last grid axis is shared by every query
        self._last = _axis_spline(grid.axes[-1], self.values, grid.dim - 1)

    @classmethod
    def from_level(cls, level: SolutionLevel, extrapolation: str = "polynomial") -> "FieldInterpolant":
        stacked = np.concatenate(
            [level.y, level.z.reshape(level.grid.shape + (-1,))], axis=-1)
        return cls(level.grid, stacked, extrapolation, level)

    def _clip(self, coords: np.ndarray, ax: int) -> np.ndarray:
        if self.extrapolation == "clamp":
            return np.clip(coords, self.grid.lower[ax], self.grid.upper[ax])
        return coords

    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if pts.shape[-1] != self.grid.dim:
            raise ValueError(f"points must have {self.grid.dim} coordinates")
        if not np.all(np.isfinite(pts)):
            raise ValueError("query points must be finite")
        out = np.empty((pts.shape[0], self.values.shape[-1]))
        d = self.grid.dim
        if d == 1:
            out[:] = self._last(self._clip(pts[:, 0], 0))
        else:
            for n, p in enumerate(pts):
                cur = self._last(self._clip(p[-1], d - 1))
                for ax in range(d - 2, -1, -1):
                    cur = _axis_spline(self.grid.axes[ax], cur, ax)(self._clip(p[ax], ax))
                out[n] = cur
        self._restore_nodes(pts, out)
        return out

    def _restore_nodes(self, pts: np.ndarray, out: np.ndarray) -> None:
        # the right-most node is evaluated from the left piece; return stored data bitwise
        idx = []
        hit = np.ones(pts.shape[0], dtype=bool)
        for ax in range(self.grid.dim):
            axis = self.grid.axes[ax]
            k = np.rint((pts[:, ax] - self.grid.lower[ax]) / self.grid.dx[ax]).astype(int)
            k = np.clip(k, 0, axis.size - 1)
            hit &= axis[k] == pts[:, ax]
            idx.append(k)
        if np.any(hit):
            out[hit] = self.values[tuple(i[hit] for i in idx)]

    def split(self, y_or_points, m: int | None = None):
        """Evaluate and split into ``(y, z)`` for a level interpolant."""
        vals = self(y_or_points)
        m = self.level.m if m is None else m
        d = self.grid.dim
        return vals[:, :m], vals[:, m:].reshape(-1, m, d)


def interpolate(level: SolutionLevel | FieldInterpolant, point) -> tuple[np.ndarray, np.ndarray]:
    """``(y, z)`` of a level at one point; ``y`` has shape ``(m,)``, ``z`` ``(m, d)``."""
    interp = level.interpolant() if isinstance(level, SolutionLevel) else level
    y, z = interp.split(np.atleast_2d(np.asarray(point, dtype=float)))
    return y[0], z[0]


def not_a_knot_slopes(axis: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Node slopes of the not-a-knot cubic spline on a uniform axis.

    ``values`` has the axis first; any trailing shape is carried along.
    """
    n = axis.size - 1
    if n < 3:
        raise ValueError("not-a-knot interpolation needs at least four nodes")
    dx = (axis[-1] - axis[0]) / n
    vals = values.reshape(n + 1, -1)
    # banded storage for (l, u) = (2, 2): ab[2 + i - j, j] = A[i, j]
    ab = np.zeros((5, n + 1))
    rhs = np.empty_like(vals)
    # interior rows: s_{k-1} + 4 s_k + s_{k+1} = 3 (y_{k+1} - y_{k-1}) / dx
    k = np.arange(1, n)
    ab[2, k] = 4.0
    ab[3, k - 1] = 1.0
    ab[1, k + 1] = 1.0
    rhs[1:n] = 3.0 * (vals[2:] - vals[:-2]) / dx
    # continuous third derivative at the first and last interior nodes
    ab[2, 0], ab[0, 2] = 1.0, -1.0
    rhs[0] = (-2.0 * vals[0] + 4.0 * vals[1] - 2.0 * vals[2]) / dx
    ab[4, n - 2], ab[2, n] = 1.0, -1.0
    rhs[n] = (-2.0 * vals[n - 2] + 4.0 * vals[n - 1] - 2.0 * vals[n]) / dx
    slopes = solve_banded((2, 2), ab, rhs)
    return slopes.reshape(values.shape)


def _hermite_operators(axis: np.ndarray, offsets: np.ndarray, weights: np.ndarray,
                       clamp: bool) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Sparse ``(A, B)`` with ``sum_k weights[k] F^(x_n + offsets[k]) = (A y + B s)_n``.

    ``F^`` is the cubic Hermite interpolant with node values ``y`` and slopes
    ``s``; outside the axis the boundary pieces are continued.
    """
    n = axis.size - 1
    lo, hi = axis[0], axis[-1]
    dx = (hi - lo) / n
    rows, cols, a_vals, b_vals = [], [], [], []
    node = np.arange(n + 1)
    for off, w in zip(offsets, weights):
        p = axis + off
        if clamp:
            p = np.clip(p, lo, hi)
        k = np.clip(np.floor((p - lo) / dx).astype(int), 0, n - 1)
        th = (p - axis[k]) / dx
        th2, th3 = th * th, th * th * th
        h00 = 2 * th3 - 3 * th2 + 1
        h01 = -2 * th3 + 3 * th2
        h10 = (th3 - 2 * th2 + th) * dx
        h11 = (th3 - th2) * dx
        rows += [node, node]
        cols += [k, k + 1]
        a_vals += [w * h00, w * h01]
        b_vals += [w * h10, w * h11]
    r, c = np.concatenate(rows), np.concatenate(cols)
    a = sparse.csr_matrix((np.concatenate(a_vals), (r, c)), shape=(n + 1, n + 1))
    b = sparse.csr_matrix((np.concatenate(b_vals), (r, c)), shape=(n + 1, n + 1))
    a.sum_duplicates()
    b.sum_duplicates()
    return a, b


class GaussianSmoother:
    """Gauss-Hermite conditional expectations of spline-interpolated grid fields.

    For a field ``F`` on the grid, :meth:`expect` returns, at every node ``x``,

        E[F^(x + W_s)]            and optionally      E[F^(x + W_s) W_s],

    where ``F^`` is the not-a-knot spline interpolant and ``W_s`` a Brownian
    increment over ``span = s``. The tensor Gauss-Hermite sum factors over
    axes, so the d-dimensional rule is applied one axis at a time; for
    ``d = 1`` this is exactly pointwise quadrature of the spline.

    Each quadrature point sits at a fixed offset from its node, so one axis
    pass is linear in the node values and slopes. The pass is stored as two
    sparse matrices per (axis, span) and reused across time levels.
    """

    def __init__(self, grid: SpaceGrid, rule: HermiteRule | int = 8,
                 extrapolation: str = "polynomial", n_workers: int | None = None):
        self.grid = grid
        self.rule = gauss_hermite(rule) if isinstance(rule, (int, np.integer)) else rule
        self.extrapolation = _check_mode(extrapolation)
        self.n_workers = resolve_workers(n_workers)
        self._ops: dict[tuple[int, float, bool], tuple] = {}

    def _operator(self, ax: int, span: float, weighted: bool):
        key = (ax, span, weighted)
        op = self._ops.get(key)
        if op is None:
            shift = math.sqrt(2.0 * span) * self.rule.nodes
            w = self.rule.weights / math.sqrt(math.pi)
            if weighted:
                w = w * shift
            op = _hermite_operators(self.grid.axes[ax], shift, w, self.extrapolation == "clamp")
            self._ops[key] = op
        return op

    def _pass(self, values: np.ndarray, ax: int, span: float, slopes: np.ndarray | None,
              weighted: bool) -> np.ndarray:
        a, b = self._operator(ax, span, weighted)
        moved = np.moveaxis(values, ax, 0)
        flat = moved.reshape(moved.shape[0], -1)
        sl = slopes.reshape(flat.shape)
        if self.n_workers == 1 or flat.shape[1] < 2 * self.n_workers:
            out = a @ flat + b @ sl
        else:
            chunks = np.array_split(np.arange(flat.shape[1]), self.n_workers)
            with ThreadPoolExecutor(self.n_workers) as pool:
                parts = list(pool.map(lambda c: a @ flat[:, c] + b @ sl[:, c], chunks))
            out = np.concatenate(parts, axis=1)
        return np.moveaxis(out.reshape(moved.shape), 0, ax)

    def _slopes(self, values: np.ndarray, ax: int) -> np.ndarray:
        moved = np.moveaxis(values, ax, 0)
        return not_a_knot_slopes(self.grid.axes[ax], moved)

    def expect(self, values: np.ndarray, span: float, increments: bool = False,
               inc_channels: slice | None = None):
        """Conditional expectations at every node.

        ``values`` has shape ``(*grid.shape, c)``. Returns ``mean`` with the same
        shape and, if ``increments``, ``inc`` with shape ``(*grid.shape, c', d)``
        whose last axis holds ``E[F W^k]``; ``c'`` covers ``inc_channels``
        (default: every channel).
        """
        if not span > 0:
            raise ValueError(f"span must be positive, got {span}")
        d = self.grid.dim
        values = np.asarray(values, dtype=float)
        if values.shape[:d] != self.grid.shape:
            raise ValueError("values do not match the grid")
        sel = slice(None) if inc_channels is None else inc_channels
        mean = values
        incs: dict[int, np.ndarray] = {}
        for ax in range(d - 1, -1, -1):
            slopes = np.moveaxis(self._slopes(mean, ax), 0, ax)
            new_mean = self._pass(mean, ax, span, np.moveaxis(slopes, ax, 0), False)
            if increments:
                for k in list(incs):
                    sk = self._slopes(incs[k], ax)
                    incs[k] = self._pass(incs[k], ax, span, sk, False)
                part = mean[..., sel]
                incs[ax] = self._pass(part, ax, span,
                                      np.moveaxis(slopes[..., sel], ax, 0), True)
            mean = new_mean
        if not increments:
            return mean, None
        return mean, np.stack([incs[k] for k in range(d)], axis=-1)


_HEADER_PREFIX = "# splinebsde level"


def write_level(level: SolutionLevel, path) -> None:
    """Plain-text dump: one row per node with coordinates, y and z components.

    The first line is ``# splinebsde level index=<i> t=<t> m=<m> d=<d>``, the
    second names the columns (``x1..xd y1..ym z1_1..zm_d``).
    """
    grid = level.grid
    d, m = grid.dim, level.m
    coords = grid.points().reshape(-1, d)
    data = np.hstack([coords, level.y.reshape(-1, m), level.z.reshape(-1, m * d)])
    cols = [f"x{k + 1}" for k in range(d)] + [f"y{k + 1}" for k in range(m)]
    cols += [f"z{a + 1}_{b + 1}" for a in range(m) for b in range(d)]
    header = (f"{_HEADER_PREFIX[2:]} index={level.index} t={level.t!r} m={m} d={d}\n"
              + " ".join(cols))
    np.savetxt(path, data, header=header, fmt="%.17g")


def read_level(path, grid: SpaceGrid | None = None) -> SolutionLevel:
    with open(path) as fh:
        first = fh.readline()
    if not first.startswith(_HEADER_PREFIX):
        raise ValueError(f"{path} is not a level dump")
    meta = dict(tok.split("=") for tok in first[len(_HEADER_PREFIX):].split())
    d, m = int(meta["d"]), int(meta["m"])
    data = np.loadtxt(path, ndmin=2)
    coords = data[:, :d]
    if grid is None:
        axes = [np.unique(coords[:, k]) for k in range(d)]
        grid = SpaceGrid(tuple(axes), tuple(a[0] for a in axes), tuple(a[-1] for a in axes),
                         tuple((a[-1] - a[0]) / (a.size - 1) for a in axes))
    y = data[:, d:d + m].reshape(grid.shape + (m,))
    z = data[:, d + m:].reshape(grid.shape + (m, d))
    return SolutionLevel(int(meta["index"]), float(meta["t"]), grid, y, z)
