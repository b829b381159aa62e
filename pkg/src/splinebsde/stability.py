"""Zero-stability of the Z recursion.

With ``f = 0`` the Z update over an integration span of ``l`` steps reduces to
the homogeneous difference equation

    sum_{j=0}^{K} gamma^l_j Z^{i+j} - Z^{i+l} = 0,

whose characteristic polynomial is ``sum_j gamma^l_j lam^{K-j} - lam^{K-l}``.
The recursion is zero-stable when every root lies in the closed unit disc and
those on the unit circle are simple.

The Y recursion needs no such analysis: with ``f = 0`` it reads
``E[Y^i] = E[Y^{i+K_y}]``, which is stable for every ``K_y``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .weights import SplineKind, default_kind, derive_z_weights

__all__ = ["CharPoly", "StabilityVerdict", "characteristic_polynomial",
           "polynomial_roots", "classify", "analyze"]

DEFAULT_TOL = 1e-9


@dataclass(frozen=True)
class CharPoly:
    """Monic characteristic polynomial, coefficients from the highest power down."""

    k_z: int
    l: int
    coeffs: tuple[float, ...]

    @property
    def degree(self) -> int:
        return len(self.coeffs) - 1

    def __call__(self, lam):
        return np.polyval(np.asarray(self.coeffs, dtype=complex), lam)


@dataclass(frozen=True)
class StabilityVerdict:
    roots: tuple[complex, ...]
    stable: bool
    max_modulus: float


def characteristic_polynomial(k_z: int, l: int = 1,
                              kind: SplineKind | str | None = None) -> CharPoly:
    if kind is None:
        kind = default_kind(k_z)
    gamma = derive_z_weights(k_z, l, kind).gamma
    coeffs = list(gamma)  # gamma_j multiplies lam^{K-j}
    coeffs[l] -= 1
    lead = coeffs[0]
    # gamma_0 > 0 for every rule in use, so the degree is exactly K
    return CharPoly(k_z, l, tuple(float(c / lead) for c in coeffs))


def polynomial_roots(poly: CharPoly | Sequence[float]) -> np.ndarray:
    """All complex roots via eigenvalues of the companion matrix."""
    coeffs = np.asarray(poly.coeffs if isinstance(poly, CharPoly) else poly, dtype=complex)
    nz = np.flatnonzero(coeffs != 0)
    if nz.size == 0:
        raise ValueError("zero polynomial has no well-defined roots")
    coeffs = coeffs[nz[0]:]
    trailing = 0
    while coeffs.size > 1 and coeffs[-1] == 0:
        coeffs = coeffs[:-1]
        trailing += 1
    n = coeffs.size - 1
    if n + trailing < 1:
        raise ValueError("constant polynomial has no roots")
    if n == 0:
        return np.zeros(trailing, dtype=complex)
    monic = coeffs / coeffs[0]
    companion = np.zeros((n, n), dtype=complex)
    companion[0, :] = -monic[1:]
    companion[1:, :-1] = np.eye(n - 1)
    roots = np.linalg.eigvals(companion)
    # one Newton polish per root tightens the residual
    deriv = np.polyder(monic)
    for idx, r in enumerate(roots):
        dp = np.polyval(deriv, r)
        if dp != 0:
            cand = r - np.polyval(monic, r) / dp
            if abs(np.polyval(monic, cand)) <= abs(np.polyval(monic, r)):
                roots[idx] = cand
    roots = np.concatenate([roots, np.zeros(trailing, dtype=complex)])
    return roots[np.lexsort((roots.imag, -np.abs(roots)))]


def classify(roots: Sequence[complex], tol: float = DEFAULT_TOL) -> StabilityVerdict:
    if not 0 < tol <= 1e-3:
        raise ValueError(f"tol must lie in (0, 1e-3], got {tol}")
    roots = np.asarray(roots, dtype=complex)
    mods = np.abs(roots)
    stable = bool(np.all(mods <= 1 + tol))
    on_circle = roots[mods >= 1 - tol]
    for a in range(on_circle.size):
        for b in range(a + 1, on_circle.size):
            if abs(on_circle[a] - on_circle[b]) <= tol:
                stable = False
    max_mod = float(mods.max()) if mods.size else 0.0
    return StabilityVerdict(tuple(complex(r) for r in roots), stable, max_mod)


def analyze(k_z: int, l: int = 1, kind: SplineKind | str | None = None,
            tol: float = DEFAULT_TOL) -> StabilityVerdict:
    return classify(polynomial_roots(characteristic_polynomial(k_z, l, kind)), tol)
