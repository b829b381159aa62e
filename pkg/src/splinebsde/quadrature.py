"""Gauss-Hermite rules and Gaussian conditional expectations."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.linalg import eigh_tridiagonal

__all__ = ["HermiteRule", "TensorRule", "gauss_hermite", "tensor_rule",
           "conditional_expectation"]

MAX_ORDER = 64


@dataclass(frozen=True, eq=False)
class HermiteRule:
    """Nodes and weights for ``int f(x) exp(-x^2) dx``."""

    order: int
    nodes: np.ndarray
    weights: np.ndarray


@dataclass(frozen=True, eq=False)
class TensorRule:
    """Product rule on ``R^d``; ``nodes`` has shape ``(L**d, d)``."""

    dim: int
    nodes: np.ndarray
    weights: np.ndarray
    base: HermiteRule


def _orthonormal_hermite(order: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Values of the orthonormal Hermite polynomials ``p_0 .. p_order`` at ``x``
    and the derivative of ``p_order``."""
    p = np.empty((order + 1,) + x.shape)
    p[0] = math.pi ** -0.25
    if order > 0:
        p[1] = math.sqrt(2.0) * x * p[0]
    for k in range(1, order):
        p[k + 1] = math.sqrt(2.0 / (k + 1)) * x * p[k] - math.sqrt(k / (k + 1)) * p[k - 1]
    dp = math.sqrt(2.0 * order) * p[order - 1]
    return p, dp


@lru_cache(maxsize=None)
def _golub_welsch(order: int) -> tuple[np.ndarray, np.ndarray]:
    off = np.sqrt(np.arange(1, order) / 2.0)
    nodes = eigh_tridiagonal(np.zeros(order), off, eigvals_only=True)
    # one Newton step on p_order, then Christoffel weights 1 / sum_k p_k(x)^2;
    # the eigenvector route underflows for the outermost nodes at large orders
    p, dp = _orthonormal_hermite(order, nodes)
    nodes = nodes - p[order] / dp
    p, _ = _orthonormal_hermite(order, nodes)
    weights = 1.0 / np.sum(p[:order] ** 2, axis=0)
    # symmetrise: the rule is exactly even
    nodes = 0.5 * (nodes - nodes[::-1])
    weights = 0.5 * (weights + weights[::-1])
    nodes.setflags(write=False)
    weights.setflags(write=False)
    return nodes, weights


def gauss_hermite(order: int = 8) -> HermiteRule:
    """L-point Gauss-Hermite rule (Golub-Welsch on the Jacobi matrix)."""
    if not isinstance(order, (int, np.integer)) or not 1 <= order <= MAX_ORDER:
        raise ValueError(f"order must be an integer in [1, {MAX_ORDER}], got {order!r}")
    nodes, weights = _golub_welsch(int(order))
    return HermiteRule(int(order), nodes, weights)


def tensor_rule(rule: HermiteRule | int, dim: int) -> TensorRule:
    if isinstance(rule, (int, np.integer)):
        rule = gauss_hermite(int(rule))
    if dim < 1:
        raise ValueError(f"dimension must be positive, got {dim}")
    idx = np.array(list(itertools.product(range(rule.order), repeat=dim)), dtype=int)
    nodes = rule.nodes[idx]
    weights = np.prod(rule.weights[idx], axis=1)
    return TensorRule(dim, nodes, weights, rule)


def conditional_expectation(phi: Callable[[np.ndarray], np.ndarray], x, span: float,
                            rule: TensorRule | HermiteRule | int = 8) -> float | np.ndarray:
    """``E[phi(x + W_span)]`` for a standard Brownian motion ``W``.

    ``phi`` receives an array of shape ``(n_points, d)`` and returns one value
    (or one row of values) per point.
    """
    if not span > 0:
        raise ValueError(f"span must be positive, got {span}")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if not isinstance(rule, TensorRule):
        rule = tensor_rule(rule, x.size)
    if rule.dim != x.size:
        raise ValueError(f"rule dimension {rule.dim} does not match point dimension {x.size}")
    points = x[None, :] + math.sqrt(2.0 * span) * rule.nodes
    values = np.asarray(phi(points), dtype=float)
    total = np.tensordot(rule.weights, values, axes=(0, 0))
    result = total / math.pi ** (rule.dim / 2)
    return float(result) if np.ndim(result) == 0 else result
