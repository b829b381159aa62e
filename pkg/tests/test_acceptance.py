"""Acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line, repeated in the pytest terminal
summary. The error-table criteria run the n_t = 8..64 ladder; the reference
rates were fitted over 8..128.
"""
import math
import time

import numpy as np
import pytest

from splinebsde import weights as weights_mod
from splinebsde.convergence import ExperimentSpec, fit_rate, run_experiment
from splinebsde.field import FieldInterpolant, build_grid
from splinebsde.problems import BSDEProblem, black_scholes, example1, example_2d
from splinebsde.quadrature import conditional_expectation
from splinebsde.solver import SolverConfig, solve
from splinebsde.stability import analyze
from splinebsde.weights import default_kind, derive_y_weights, derive_z_weights

from reference_values import (
    BS_PARAMS,
    BS_Y0,
    BS_Z0,
    ERRORS,
    NATURAL_ROOTS,
    ROOTS,
    Y_WEIGHTS,
    Z_WEIGHTS,
)

ACCEPT_LADDER = (8, 16, 32, 64)
FACTOR = 3.0
RATE_BAND = 0.35


def _match_roots(found, expected, tol):
    found = list(found)
    worst = 0.0
    for r in expected:
        dist = [abs(r - f) for f in found]
        best = int(np.argmin(dist))
        worst = max(worst, dist[best])
        found.pop(best)
    return worst if not found else math.inf


def test_criterion_1_weight_tables(verdict):
    weights_mod._unit_weights.cache_clear()
    start = time.perf_counter()
    bad = []
    for (k, kind), expected in Y_WEIGHTS.items():
        if derive_y_weights(k, kind).gamma != expected:
            bad.append(f"Y K={k} {kind}")
    for (k, kind), expected in Z_WEIGHTS.items():
        if derive_z_weights(k, 1, kind).gamma != expected:
            bad.append(f"Z K={k} {kind}")
    elapsed = time.perf_counter() - start
    ok = not bad and elapsed < 1.0
    verdict("criterion 1", ok, f"{len(Y_WEIGHTS) + len(Z_WEIGHTS)} weight rows exact, "
            f"mismatches={bad or 'none'}, {elapsed:.2f}s (< 1 s)")
    assert not bad
    assert elapsed < 1.0


def test_criterion_2_stability_roots(verdict):
    weights_mod._unit_weights.cache_clear()
    start = time.perf_counter()
    worst, wrong_verdict = 0.0, []
    cases = [((k, l), None, r) for (k, l), r in ROOTS.items()]
    cases += [((k, l), "natural", r) for (k, l), r in NATURAL_ROOTS.items()]
    for (k_z, l), kind, expected in cases:
        v = analyze(k_z, l, kind)
        worst = max(worst, _match_roots(v.roots, (1.0,) + expected, 1e-4))
        if v.stable != (l == 1):
            wrong_verdict.append((k_z, l, kind))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and not wrong_verdict and elapsed < 1.0
    verdict("criterion 2", ok, f"{len(cases)} rows, worst root deviation {worst:.1e} (< 1e-4), "
            f"verdict mismatches={wrong_verdict or 'none'}, {elapsed:.2f}s (< 1 s)")
    assert worst < 1e-4
    assert not wrong_verdict
    assert elapsed < 1.0


def _table_check(problem, triples, components=("y", "z")):
    """Run the 8..64 ladder and compare cells and rates with the reference table."""
    spec = ExperimentSpec(problem, triples=triples, ladder=ACCEPT_LADDER)
    report = run_experiment(spec)
    failures, summary = [], []
    for triple in report.triples():
        ref = ERRORS[problem][triple]
        refs = {"y": (ref[0], ref[1]), "z": (ref[2], ref[3])}
        cells = report.row(triple)
        for comp in components:
            ref_errs, ref_rate = refs[comp]
            ours = [getattr(c, "err_" + comp) for c in cells]
            ratios = [o / r for o, r in zip(ours, ref_errs)]
            for n, ratio in zip(ACCEPT_LADDER, ratios):
                if not 1 / FACTOR <= ratio <= FACTOR:
                    failures.append(f"{triple} {comp.upper()} n_t={n} ratio {ratio:.2f}")
            rate = fit_rate(ours, ACCEPT_LADDER)
            if abs(rate - ref_rate) > RATE_BAND:
                failures.append(f"{triple} {comp.upper()} rate {rate:.2f} vs {ref_rate}")
            summary.append(f"{triple}{comp.upper()} rate {rate:.2f}/{ref_rate} "
                           f"ratios {min(ratios):.2f}..{max(ratios):.2f}")
    return failures, summary


@pytest.mark.slow
def test_criterion_3_example1_tables(verdict):
    failures, summary = _table_check("example1", ((1, 1, 1), (2, 3, 3), (3, 3, 3), (4, 4, 4)))
    verdict("criterion 3", not failures, "; ".join(failures or summary))
    assert not failures


@pytest.mark.slow
def test_criterion_4_example2_tables(verdict):
    failures, summary = _table_check("example2", ((1, 1, 1), (2, 3, 3), (3, 3, 3)))
    verdict("criterion 4", not failures, "; ".join(failures or summary))
    assert not failures


@pytest.fixture(scope="module")
def call_solution():
    problem = black_scholes(**BS_PARAMS)
    return solve(problem, SolverConfig(3, 3, 32))


def test_criterion_5_call_price_and_delta(verdict, call_solution):
    # the closed-form price is 3.6599684533, 1.55e-6 below the rounded
    # reference, so the price bound cannot be met by an exact solver either
    dy = abs(call_solution.y0[0] - BS_Y0)
    dz = abs(call_solution.z0[0, 0] - BS_Z0)
    exact_y, exact_z = black_scholes(**BS_PARAMS).analytic(0.0, np.array([[BS_PARAMS["s0"]]]))
    ok = dy < 1e-6 and dz < 1e-5
    verdict("criterion 5", ok, f"|Y0-{BS_Y0}|={dy:.2e} (< 1e-6), |Z0-{BS_Z0}|={dz:.2e} (< 1e-5); "
            f"Y0={call_solution.y0[0]:.10f}, Z0={call_solution.z0[0, 0]:.8f}; closed form "
            f"{exact_y[0, 0]:.10f} / {exact_z[0, 0, 0]:.8f} is itself "
            f"{abs(exact_y[0, 0] - BS_Y0):.2e} from the price reference")
    assert dz < 1e-5
    assert dy < 1e-6


@pytest.mark.slow
def test_criterion_6_two_dimensional(verdict):
    failures, summary = [], []
    ref_errs = ERRORS["example2d"][(2, 3, 3)][0]
    report = run_experiment(ExperimentSpec("example2d", triples=((2, 3, 3),), ladder=ACCEPT_LADDER))
    ours = [c.err_y for c in report.row((2, 3, 3))]
    for n, o, r in zip(ACCEPT_LADDER, ours, ref_errs):
        if not 1 / FACTOR <= o / r <= FACTOR:
            failures.append(f"n_t={n} ratio {o / r:.2f}")
    rate = fit_rate(ours, ACCEPT_LADDER)
    if not 2.5 <= rate <= 3.2:
        failures.append(f"rate {rate:.2f} outside [2.5, 3.2]")
    summary = ", ".join(f"{e:.2e}" for e in ours) + f"; rate {rate:.2f}"
    verdict("criterion 6", not failures, "; ".join(failures) or f"Y errors {summary}")
    assert not failures


def _martingale(g, d=1):
    return BSDEProblem("martingale", 1, d, 1.0, lambda t, x, y, z: np.zeros_like(y), terminal=g)


def test_criterion_7_property_suite(verdict):
    start = time.perf_counter()
    checks = {}

    weights_mod._unit_weights.cache_clear()
    sums = []
    for k in range(1, 7):
        for variant in ("quadratic", "natural"):
            kind = default_kind(k, variant)
            sums.append(sum(derive_y_weights(k, kind).gamma))
            sums.extend(sum(derive_z_weights(k, l, kind).gamma) for l in range(1, k + 1))
    checks["weight sums"] = all(s == 1 for s in sums)

    worst = 0.0
    for L in range(1, 21):
        for p in range(2 * L):
            exact = 0.0 if p % 2 else float(math.prod(range(p - 1, 0, -2)))
            got = conditional_expectation(lambda w: w[:, 0] ** p, 0.0, 1.0, L)
            worst = max(worst, abs(got - exact) / max(1.0, math.sqrt(math.prod(range(2 * p - 1, 0, -2)))))
    checks["Gauss-Hermite exactness"] = worst < 1e-12

    g = build_grid(1, (-4, 4), 0.25)
    rng = np.random.default_rng(7)
    vals = rng.normal(size=g.shape[0])
    checks["node reproduction"] = np.array_equal(FieldInterpolant(g, vals)(g.axes[0][:, None])[:, 0], vals)
    errs = []
    for dx in (0.25, 0.125, 0.0625):
        grid = build_grid(1, (-8, 8), dx)
        x = np.linspace(-8, 8, 4001)
        errs.append(np.max(np.abs(FieldInterpolant(grid, np.sin(grid.axes[0]))(x[:, None])[:, 0] - np.sin(x))))
    factors = [a / b for a, b in zip(errs, errs[1:])]
    checks["refinement factor"] = all(12 <= f <= 20 for f in factors)

    mart_ok = True
    for k in (1, 2, 3):
        cfg = SolverConfig(k, k, 8)
        c = solve(_martingale(lambda x: np.full((x.shape[0], 1), 1.5)), cfg)
        lin = solve(_martingale(lambda x: x[:, :1]), cfg)
        quad = solve(_martingale(lambda x: x[:, :1] ** 2), cfg)
        mart_ok &= c.y0[0] == 1.5 and c.z0[0, 0] == 0.0
        mart_ok &= abs(lin.y0[0]) < 1e-13 and abs(lin.z0[0, 0] - 1) < 1e-13
        mart_ok &= abs(quad.y0[0] - 1.0) < 1e-8
    checks["martingale fixed points"] = bool(mart_ok)

    a = solve(example_2d(), SolverConfig(2, 2, 4, n_workers=1))
    b = solve(example_2d(), SolverConfig(2, 2, 4, n_workers=4))
    spec = dict(problem="example1", triples=((2, 2, None),), ladder=(4, 8))
    serial = run_experiment(ExperimentSpec(**spec, workers=1))
    pooled = run_experiment(ExperimentSpec(**spec, workers=2))
    checks["determinism"] = (np.array_equal(a.level.y, b.level.y) and np.array_equal(a.level.z, b.level.z)
                             and [(c.err_y, c.err_z) for c in serial.cells]
                             == [(c.err_y, c.err_z) for c in pooled.cells])

    elapsed = time.perf_counter() - start
    failed = [name for name, ok in checks.items() if not ok]
    ok = not failed and elapsed < 30.0
    verdict("criterion 7", ok, f"{len(checks)} property groups, failed={failed or 'none'}, "
            f"refinement factors {', '.join(f'{f:.1f}' for f in factors)}, {elapsed:.1f}s (< 30 s)")
    assert not failed
    assert elapsed < 30.0


def test_criterion_8_z_order_ladder(verdict):
    errs = []
    for k_z in (1, 2, 3):
        r = solve(example1(), SolverConfig(3, k_z, 64))
        errs.append(r.errors(example1())[1])
    ok = errs[0] > errs[1] > errs[2]
    verdict("criterion 8", ok, "Z errors at n_t=64 for K_z=1,2,3: " + ", ".join(f"{e:.2e}" for e in errs))
    assert ok
