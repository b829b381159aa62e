"""Multistep weights from piecewise-cubic interpolation of equally spaced data.

The time integrals in the exact one-step identities for Y and Z are replaced by
integrals of an interpolant through the support values at ``t_i, ..., t_{i+K}``.
Because every interpolant used here is linear in its support values, the
integral is a fixed linear combination of them; the coefficients of that
combination (normalised by the integration span) are the scheme weights.

All routines are generic over the number type, so the same code produces exact
:class:`fractions.Fraction` weights and floating-point splines.
"""
from __future__ import annotations

import enum
import math
from functools import lru_cache
from dataclasses import dataclass
from fractions import Fraction
from numbers import Real
from typing import Sequence

__all__ = [
    "SplineKind",
    "CubicPiece",
    "YWeights",
    "ZWeights",
    "build_spline",
    "integrate_piece",
    "default_kind",
    "derive_y_weights",
    "derive_z_weights",
]


class SplineKind(enum.Enum):
    """Closure used to make the interpolation system square."""

    LINE = "line"
    QUADRATIC = "quadratic"
    NATURAL = "natural"
    NOT_A_KNOT = "not-a-knot"

    def valid_for(self, k: int) -> bool:
        if self is SplineKind.LINE:
            return k == 1
        if self in (SplineKind.QUADRATIC, SplineKind.NATURAL):
            return k == 2
        return k >= 3

    @classmethod
    def parse(cls, value: "SplineKind | str") -> "SplineKind":
        if isinstance(value, cls):
            return value
        aliases = {"notaknot": cls.NOT_A_KNOT, "nak": cls.NOT_A_KNOT,
                   "polynomial": cls.QUADRATIC, "natural-cubic": cls.NATURAL}
        key = str(value).strip().lower()
        if key in aliases:
            return aliases[key]
        return cls(key)


def default_kind(k: int, k2_variant: SplineKind | str = SplineKind.QUADRATIC) -> SplineKind:
    """Interpolant used for a ``k``-step rule (``k2_variant`` only matters for k=2)."""
    if k < 1:
        raise ValueError(f"step count must be positive, got {k}")
    if k == 1:
        return SplineKind.LINE
    if k == 2:
        kind = SplineKind.parse(k2_variant)
        if kind not in (SplineKind.QUADRATIC, SplineKind.NATURAL):
            raise ValueError(f"k=2 variant must be quadratic or natural, got {kind.value}")
        return kind
    return SplineKind.NOT_A_KNOT


@dataclass(frozen=True)
class CubicPiece:
    """``a + b (s - t_j) + c (s - t_j)^2 + d (s - t_j)^3`` on one subinterval."""

    a: Real
    b: Real
    c: Real
    d: Real

    def __call__(self, ds):
        return self.a + ds * (self.b + ds * (self.c + ds * self.d))

    def derivative(self, ds, order: int = 1):
        if order == 1:
            return self.b + ds * (2 * self.c + 3 * self.d * ds)
        if order == 2:
            return 2 * self.c + 6 * self.d * ds
        if order == 3:
            return 6 * self.d
        raise ValueError("order must be 1, 2 or 3")


@dataclass(frozen=True)
class YWeights:
    k_y: int
    gamma: tuple[Fraction, ...]
    kind: SplineKind

    def as_floats(self) -> tuple[float, ...]:
        return tuple(float(g) for g in self.gamma)


@dataclass(frozen=True)
class ZWeights:
    k_z: int
    l: int
    gamma: tuple[Fraction, ...]
    kind: SplineKind

    def as_floats(self) -> tuple[float, ...]:
        return tuple(float(g) for g in self.gamma)


def _is_exact(x) -> bool:
    return isinstance(x, (int, Fraction))


def _solve_dense(a: list[list], b: list[list]) -> list[list]:
    """Gaussian elimination for ``a x = b`` with one column of ``b`` per right-hand side.

    Exact when the entries are rationals.
    """
    n = len(b)
    m = [row[:] + list(rhs) for row, rhs in zip(a, b)]
    exact = all(_is_exact(v) for row in m for v in row)
    for col in range(n):
        if exact:
            piv = next((r for r in range(col, n) if m[r][col] != 0), None)
        else:
            piv = max(range(col, n), key=lambda r: abs(m[r][col]))
            if m[piv][col] == 0:
                piv = None
        if piv is None:
            raise ZeroDivisionError("singular spline system")
        m[col], m[piv] = m[piv], m[col]
        p = m[col][col]
        for r in range(n):
            if r != col and m[r][col] != 0:
                factor = m[r][col] / p
                m[r] = [x - factor * y for x, y in zip(m[r], m[col])]
    return [[v / m[i][i] for v in m[i][n:]] for i in range(n)]


def build_spline(support_values: Sequence[Real], kind: SplineKind | str, h: Real = 1) -> list[CubicPiece]:
    """Interpolant through ``support_values`` at nodes ``0, h, ..., K h``.

    Returns one :class:`CubicPiece` per subinterval. Pieces are C2 at interior
    nodes; the two extra conditions depend on ``kind``:

    * ``LINE`` (K=1): the single piece is affine.
    * ``QUADRATIC`` (K=2): one parabola through all three points.
    * ``NATURAL`` (K=2): zero second derivative at both ends.
    * ``NOT_A_KNOT`` (K>=3): third derivative continuous at the first and last
      interior nodes.
    """
    values = list(support_values)
    return _build_splines([values], kind, h)[0]


def _build_splines(columns: list[list], kind: SplineKind | str, h: Real) -> list[list[CubicPiece]]:
    """One interpolant per column of support values; the system is solved once."""
    kind = SplineKind.parse(kind)
    k = len(columns[0]) - 1
    if k < 1:
        raise ValueError("need at least two support values")
    if any(len(c) != k + 1 for c in columns):
        raise ValueError("support columns differ in length")
    if not kind.valid_for(k):
        raise ValueError(f"{kind.value} interpolation is not defined for K={k}")
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    for v in (v for c in columns for v in c):
        if not _is_exact(v) and not math.isfinite(v):
            raise ValueError("support values must be finite")
    if not _is_exact(h) and not math.isfinite(h):
        raise ValueError("h must be finite")

    exact = all(_is_exact(v) for c in columns for v in c) and _is_exact(h)
    one = Fraction(1) if exact else 1.0
    zero = one * 0
    h = one * h
    n = 4 * k
    rows: list[list] = []
    rhs: list[list] = []

    def row(entries: dict[int, Real], node: int | None = None) -> None:
        r = [zero] * n
        for idx, coef in entries.items():
            r[idx] = one * coef
        rows.append(r)
        rhs.append([zero] * len(columns) if node is None else [one * c[node] for c in columns])

    # unknown layout: piece j -> (a, b, c, d) at 4j .. 4j+3
    for j in range(k):
        row({4 * j: 1}, j)
        row({4 * j: 1, 4 * j + 1: h, 4 * j + 2: h**2, 4 * j + 3: h**3}, j + 1)
    for j in range(k - 1):
        row({4 * j + 1: 1, 4 * j + 2: 2 * h, 4 * j + 3: 3 * h**2, 4 * (j + 1) + 1: -1})
        row({4 * j + 2: 2, 4 * j + 3: 6 * h, 4 * (j + 1) + 2: -2})

    if kind is SplineKind.LINE:
        row({2: 1})
        row({3: 1})
    elif kind is SplineKind.QUADRATIC:
        row({3: 1})
        row({7: 1})
    elif kind is SplineKind.NATURAL:
        row({2: 2})
        last = 4 * (k - 1)
        row({last + 2: 2, last + 3: 6 * h})
    else:
        row({3: 1, 7: -1})
        last = 4 * (k - 1)
        row({last - 1: 1, last + 3: -1})

    coef = _solve_dense(rows, rhs)
    return [[CubicPiece(*(coef[4 * j + i][col] for i in range(4))) for j in range(k)]
            for col in range(len(columns))]


def integrate_piece(piece: CubicPiece, h: Real):
    """Integral of a piece over its own subinterval of width ``h``."""
    if not h > 0:
        raise ValueError(f"h must be positive, got {h}")
    for v in (piece.a, piece.b, piece.c, piece.d, h):
        if not _is_exact(v) and not math.isfinite(v):
            raise ValueError("non-finite spline coefficient")
    return piece.a * h + piece.b * h**2 / 2 + piece.c * h**3 / 3 + piece.d * h**4 / 4


@lru_cache(maxsize=None)
def _unit_weights(k: int, span: int, kind: SplineKind) -> tuple[Fraction, ...]:
    h = Fraction(1)
    units = [[Fraction(int(i == j)) for i in range(k + 1)] for j in range(k + 1)]
    gamma = []
    for pieces in _build_splines(units, kind, h):
        total = sum((integrate_piece(p, h) for p in pieces[:span]), Fraction(0))
        gamma.append(total / (span * h))
    return tuple(gamma)


def derive_y_weights(k_y: int, kind: SplineKind | str | None = None) -> YWeights:
    """Weights ``gamma_j`` with ``int_0^{K h} S = K h sum_j gamma_j g_j``."""
    if not isinstance(k_y, int) or k_y < 1:
        raise ValueError(f"k_y must be a positive integer, got {k_y!r}")
    kind = default_kind(k_y) if kind is None else SplineKind.parse(kind)
    if not kind.valid_for(k_y):
        raise ValueError(f"{kind.value} interpolation is not defined for K={k_y}")
    return YWeights(k_y, _unit_weights(k_y, k_y, kind), kind)


def derive_z_weights(k_z: int, l: int = 1, kind: SplineKind | str | None = None) -> ZWeights:
    """Weights ``gamma_j`` with ``int_0^{l h} S = l h sum_j gamma_j g_j``."""
    if not isinstance(k_z, int) or k_z < 1:
        raise ValueError(f"k_z must be a positive integer, got {k_z!r}")
    if not isinstance(l, int) or not 1 <= l <= k_z:
        raise ValueError(f"l must satisfy 1 <= l <= k_z={k_z}, got {l!r}")
    kind = default_kind(k_z) if kind is None else SplineKind.parse(kind)
    if not kind.valid_for(k_z):
        raise ValueError(f"{kind.value} interpolation is not defined for K={k_z}")
    return ZWeights(k_z, l, _unit_weights(k_z, l, kind), kind)
