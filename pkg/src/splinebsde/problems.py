"""BSDE problem definitions.

Every callable is vectorised over points. With ``n`` points:

* ``generator(t, x, y, z)``: ``x`` is ``(n, d)`` (forward state), ``y`` is
  ``(n, m)``, ``z`` is ``(n, m, d)``; returns ``(n, m)``.
* ``terminal(x)``: ``(n, d) -> (n, m)``.
* ``analytic(t, x)``: returns ``(Y, Z)`` with shapes ``(n, m)`` and ``(n, m, d)``.

The solver always works on a grid in the Brownian variable ``w``; the forward
state at time ``t`` is ``forward.state(t, w)`` (identity for Brownian
problems, the exact lognormal map for geometric Brownian motion).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.stats import norm

__all__ = [
    "Brownian",
    "GBM",
    "BSDEProblem",
    "SmoothedPayoff",
    "example1",
    "example2",
    "black_scholes",
    "example_2d",
    "gbm_step",
    "smooth_payoff",
    "call_price",
    "call_delta",
    "make_problem",
    "PROBLEMS",
]


@dataclass(frozen=True)
class Brownian:
    """``X_t = W_t``."""

    def state(self, t: float, w: np.ndarray) -> np.ndarray:
        return w


@dataclass(frozen=True)
class GBM:
    """``dS = mu S dt + sigma S dW`` started at ``s0``."""

    mu: float
    sigma: float
    s0: float

    def __post_init__(self) -> None:
        if not self.sigma > 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not self.s0 > 0:
            raise ValueError(f"s0 must be positive, got {self.s0}")

    def state(self, t: float, w: np.ndarray) -> np.ndarray:
        return gbm_step(self.s0, t, w, self.mu, self.sigma)


def gbm_step(s, h, increment, mu: float, sigma: float):
    """Exact lognormal step ``s * exp((mu - sigma^2/2) h + sigma * increment)``."""
    s = np.asarray(s, dtype=float)
    if np.any(s <= 0):
        raise ValueError("asset values must be positive")
    out = s * np.exp((mu - 0.5 * sigma**2) * h + sigma * np.asarray(increment, dtype=float))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True, eq=False)
class BSDEProblem:
    name: str
    m: int
    d: int
    T: float
    generator: Callable
    terminal: Callable
    forward: object = field(default_factory=Brownian)
    analytic: Optional[Callable] = None
    terminal_z: Optional[Callable] = None
    z_independent: bool = False
    drop_terminal: bool = False
    params: dict = field(default_factory=dict)
    grid_hook: Optional[Callable] = field(default=None, repr=False)

    def __post_init__(self) -> None:
        if self.m < 1 or self.d < 1:
            raise ValueError("m and d must be positive")
        if not self.T > 0:
            raise ValueError(f"horizon must be positive, got {self.T}")

    def state(self, t: float, w: np.ndarray) -> np.ndarray:
        return self.forward.state(t, w)

    def for_grid(self, grid) -> "BSDEProblem":
        """Problem adapted to a spatial grid (e.g. payoff smoothing width)."""
        return self if self.grid_hook is None else self.grid_hook(self, grid)

    def with_params(self, **overrides) -> "BSDEProblem":
        return replace(self, **overrides)


# --- Example 1: linear generator, lognormal solution -----------------------

def example1(T: float = 1.0) -> BSDEProblem:
    def generator(t, x, y, z):
        return -0.625 * y

    def solution(t, x):
        y = np.exp(x[:, :1] / 2 + t / 2)
        return y, (y / 2)[:, :, None]

    return BSDEProblem(
        "example1", 1, 1, T, generator,
        terminal=lambda x: np.exp(x[:, :1] / 2 + T / 2),
        analytic=solution,
        terminal_z=lambda x: solution(T, x)[1],
        z_independent=True,
        params={"T": T},
    )


# --- Example 2: nonlinear generator ---------------------------------------

def example2(T: float = 1.0) -> BSDEProblem:
    def generator(t, x, y, z):
        et = math.exp(t * t)
        zz = z[:, :, 0]
        return 0.5 * (et - 4 * t * y - 3 * np.exp(t * t - y / et) + zz * zz / et)

    def solution(t, x):
        w = x[:, :1]
        et = math.exp(t * t)
        y = np.log(np.sin(w) + 3) * et
        z = et * np.cos(w) / (np.sin(w) + 3)
        return y, z[:, :, None]

    return BSDEProblem(
        "example2", 1, 1, T, generator,
        terminal=lambda x: solution(T, x)[0],
        analytic=solution,
        terminal_z=lambda x: solution(T, x)[1],
        params={"T": T},
    )


# --- Two-dimensional example ----------------------------------------------

def example_2d(T: float = 1.0) -> BSDEProblem:
    def generator(t, x, y, z):
        return y - 0.5 * z[:, :, 0] - 0.5 * z[:, :, 1]

    def solution(t, x):
        s = x[:, 0:1] + x[:, 1:2] + t
        c = np.cos(s)
        return np.sin(s), np.stack([c, c], axis=-1)

    return BSDEProblem(
        "example2d", 1, 2, T, generator,
        terminal=lambda x: solution(T, x)[0],
        analytic=solution,
        terminal_z=lambda x: solution(T, x)[1],
        params={"T": T},
    )


# --- Black-Scholes ---------------------------------------------------------

def call_price(s, strike, r, div, sigma, tau):
    """European call with continuous dividend yield; ``tau`` is time to expiry."""
    s = np.asarray(s, dtype=float)
    if tau <= 0:
        return np.maximum(s - strike, 0.0)
    sq = sigma * math.sqrt(tau)
    d1 = (np.log(s / strike) + (r - div + 0.5 * sigma**2) * tau) / sq
    d2 = d1 - sq
    return s * math.exp(-div * tau) * norm.cdf(d1) - strike * math.exp(-r * tau) * norm.cdf(d2)


def call_delta(s, strike, r, div, sigma, tau):
    s = np.asarray(s, dtype=float)
    if tau <= 0:
        return (s > strike).astype(float)
    sq = sigma * math.sqrt(tau)
    d1 = (np.log(s / strike) + (r - div + 0.5 * sigma**2) * tau) / sq
    return math.exp(-div * tau) * norm.cdf(d1)


def _hat_integrals(u: np.ndarray):
    """First and second antiderivatives of ``max(1 - |u|, 0)`` vanishing at -inf.

    The second one is continued linearly (slope 1) to the right of ``u = 1``.
    """
    v = np.clip(u, -1.0, 1.0)
    a = v + 1.0
    b = 1.0 - v
    neg = v < 0
    p1 = np.where(neg, a**2 / 2, 1.0 - b**2 / 2)
    p2 = np.where(neg, a**3 / 6, a - 1.0 + b**3 / 6)
    return p1, np.where(u > 1.0, u, p2)


# fourth-order kernel as (shift, weight) pairs of unit hats
_KERNEL = ((0.0, 1.0 + 2.0 / 12), (1.0, -1.0 / 12), (-1.0, -1.0 / 12))


@dataclass(frozen=True)
class SmoothedPayoff:
    """Call payoff ``max(S - K, 0)`` mollified with a fourth-order kernel.

    The kernel is ``hat(u) - (hat(u+1) - 2 hat(u) + hat(u-1)) / 12`` scaled to
    the half-width ``delta``; it reproduces cubics, so the smoothed payoff
    equals the raw payoff for ``|S - K| >= delta``.
    """

    strike: float
    delta: float

    def _conv(self, s):
        eps = self.delta / 2.0
        u = (np.asarray(s, dtype=float) - self.strike) / eps
        value = np.zeros_like(u)
        slope = np.zeros_like(u)
        for shift, coef in _KERNEL:
            p1, p2 = _hat_integrals(u + shift)
            value += coef * p2
            slope += coef * p1
        return eps * value, slope

    def __call__(self, s):
        return self._conv(s)[0]

    def derivative(self, s):
        return self._conv(s)[1]

    def raw(self, s):
        return np.maximum(np.asarray(s, dtype=float) - self.strike, 0.0)


def smooth_payoff(strike: float, delta: float) -> SmoothedPayoff:
    if not delta > 0:
        raise ValueError(f"smoothing radius must be positive, got {delta}")
    return SmoothedPayoff(float(strike), float(delta))


def black_scholes(strike: float = 100.0, r: float = 0.1, mu: float = 0.2, div: float = 0.0,
                  sigma: float = 0.25, s0: float = 100.0, T: float = 0.1,
                  smoothing: float | str | None = "auto",
                  smoothing_cells: float = 8.0) -> BSDEProblem:
    """Call option as an FBSDE driven by geometric Brownian motion.

    ``smoothing`` is the payoff half-width in asset units, ``None`` for the raw
    payoff, or ``"auto"`` to use ``smoothing_cells`` space steps mapped to
    asset units at the strike (resolved once the grid is known).
    """
    if not sigma > 0 or not s0 > 0 or not T > 0 or not strike > 0:
        raise ValueError("strike, sigma, s0 and T must be positive")
    if not smoothing_cells > 0:
        raise ValueError(f"smoothing_cells must be positive, got {smoothing_cells}")
    forward = GBM(mu, sigma, s0)
    theta = (mu - r + div) / sigma

    def generator(t, x, y, z):
        return -r * y - theta * z[:, :, 0]

    def solution(t, x):
        s = x[:, :1]
        tau = T - t
        y = call_price(s, strike, r, div, sigma, tau)
        z = sigma * s * call_delta(s, strike, r, div, sigma, tau)
        return y, z[:, :, None]

    def with_payoff(payoff: SmoothedPayoff | None) -> dict:
        if payoff is None:
            return {"terminal": lambda x: np.maximum(x[:, :1] - strike, 0.0),
                    "terminal_z": lambda x: (sigma * x[:, :1] * (x[:, :1] > strike))[:, :, None]}
        return {"terminal": lambda x: payoff(x[:, :1]),
                "terminal_z": lambda x: (sigma * x[:, :1] * payoff.derivative(x[:, :1]))[:, :, None]}

    params = {"strike": strike, "r": r, "mu": mu, "div": div, "sigma": sigma,
              "s0": s0, "T": T, "smoothing": smoothing, "smoothing_cells": smoothing_cells}

    def resolve(problem: BSDEProblem, grid) -> BSDEProblem:
        delta = smoothing_cells * grid.dx[0] * sigma * strike
        return replace(problem, grid_hook=None,
                       params={**problem.params, "smoothing": delta},
                       **with_payoff(smooth_payoff(strike, delta)))

    if smoothing == "auto":
        fns, hook = with_payoff(None), resolve
    else:
        fns = with_payoff(None if smoothing is None else smooth_payoff(strike, float(smoothing)))
        hook = None
    return BSDEProblem(
        "black_scholes", 1, 1, T, generator, forward=forward, analytic=solution,
        drop_terminal=True, params=params, grid_hook=hook, **fns,
    )


PROBLEMS: dict[str, Callable[..., BSDEProblem]] = {
    "example1": example1,
    "example2": example2,
    "black_scholes": black_scholes,
    "example2d": example_2d,
}


def make_problem(name: str, **params) -> BSDEProblem:
    key = name.strip().lower().replace("-", "_")
    aliases = {"bs": "black_scholes", "blackscholes": "black_scholes",
               "example_2d": "example2d", "2d": "example2d"}
    key = aliases.get(key, key)
    if key not in PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}")
    return PROBLEMS[key](**params)
