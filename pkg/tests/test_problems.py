import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import integrate

from splinebsde.field import build_grid
from splinebsde.problems import (
    GBM,
    black_scholes,
    call_delta,
    call_price,
    example1,
    example2,
    example_2d,
    gbm_step,
    make_problem,
    smooth_payoff,
)


def _pde_residual(problem, t, w, eps=1e-4):
    """u_t + u_ww / 2 + f for u(t, w) = Y(t, state(t, w)); zero for a true solution."""
    w = np.atleast_2d(w)
    d = w.shape[1]

    def u(tt, ww):
        return problem.analytic(tt, problem.state(tt, ww))

    y, z = u(t, w)
    ut = (u(t + eps, w)[0] - u(t - eps, w)[0]) / (2 * eps)
    lap = np.zeros_like(y)
    grad = np.zeros_like(z)
    for k in range(d):
        e = np.zeros(d)
        e[k] = eps
        up, dn = u(t, w + e)[0], u(t, w - e)[0]
        lap += (up - 2 * y + dn) / eps**2
        grad[:, :, k] = (up - dn) / (2 * eps)
    f = problem.generator(t, problem.state(t, w), y, z)
    return ut + 0.5 * lap + f, np.max(np.abs(grad - z))


@pytest.mark.parametrize("factory", [example1, example2, example_2d,
                                     lambda: black_scholes(smoothing=None)])
def test_closed_forms_solve_their_pde(factory):
    problem = factory()
    rng = np.random.default_rng(5)
    for _ in range(5):
        t = rng.uniform(0.1, 0.9) * problem.T
        w = rng.uniform(-1.5, 1.5, size=(1, problem.d))
        res, zerr = _pde_residual(problem, t, w)
        scale = max(1.0, float(np.abs(problem.analytic(t, problem.state(t, w))[0]).max()))
        assert np.max(np.abs(res)) < 1e-5 * scale
        assert zerr < 1e-6 * scale


@pytest.mark.parametrize("factory", [example1, example2, example_2d])
def test_terminal_matches_solution(factory):
    p = factory()
    x = np.linspace(-3, 3, 7)[:, None].repeat(p.d, axis=1)
    np.testing.assert_allclose(p.terminal(x), p.analytic(p.T, x)[0], rtol=1e-14)
    np.testing.assert_allclose(p.terminal_z(x), p.analytic(p.T, x)[1], rtol=1e-14)


def test_call_price_against_lognormal_integral():
    s, k, r, div, sigma, tau = 100.0, 95.0, 0.05, 0.02, 0.3, 0.5
    m = math.log(s) + (r - div - sigma**2 / 2) * tau
    v = sigma * math.sqrt(tau)

    def integrand(x):
        return max(math.exp(x) - k, 0.0) * math.exp(-((x - m) ** 2) / (2 * v * v)) / (v * math.sqrt(2 * math.pi))

    ref, _ = integrate.quad(integrand, math.log(k), m + 12 * v, epsabs=1e-12)
    assert call_price(s, k, r, div, sigma, tau) == pytest.approx(math.exp(-r * tau) * ref, rel=1e-9)
    bump = 1e-4
    fd = (call_price(s + bump, k, r, div, sigma, tau) - call_price(s - bump, k, r, div, sigma, tau)) / (2 * bump)
    assert call_delta(s, k, r, div, sigma, tau) == pytest.approx(fd, rel=1e-7)


def test_reference_call_values():
    # strike = spot = 100, r = 0.1, sigma = 0.25, T = 0.1
    p = black_scholes(smoothing=None)
    y, z = p.analytic(0.0, np.array([[100.0]]))
    assert y[0, 0] == pytest.approx(3.6599684533, abs=1e-9)
    assert z[0, 0, 0] == pytest.approx(14.1482307, abs=1e-6)


def test_expired_call_is_payoff():
    s = np.array([90.0, 100.0, 110.0])
    np.testing.assert_array_equal(call_price(s, 100.0, 0.1, 0.0, 0.2, 0.0), [0.0, 0.0, 10.0])
    np.testing.assert_array_equal(call_delta(s, 100.0, 0.1, 0.0, 0.2, 0.0), [0.0, 0.0, 1.0])


def _direct_smoothing(strike, delta, s):
    """Convolution of the payoff with the fourth-order kernel by adaptive quadrature."""
    eps = delta / 2

    def hat(u):
        return max(1 - abs(u), 0.0)

    def kernel(u):
        return hat(u) - (hat(u + 1) - 2 * hat(u) + hat(u - 1)) / 12

    def integrand(u):
        return max(s - eps * u - strike, 0.0) * kernel(u)

    val, _ = integrate.quad(integrand, -2, 2, points=[-1, 0, 1, (s - strike) / eps],
                            epsabs=1e-13, limit=200)
    return val


@settings(max_examples=25, deadline=None)
@given(delta=st.floats(0.1, 5.0), u=st.floats(-1.5, 1.5))
def test_smoothed_payoff_matches_direct_convolution(delta, u):
    payoff = smooth_payoff(100.0, delta)
    s = 100.0 + u * delta
    assert float(payoff(s)) == pytest.approx(_direct_smoothing(100.0, delta, s), abs=1e-11 * (1 + delta))


@settings(max_examples=25, deadline=None)
@given(delta=st.floats(0.05, 5.0))
def test_smoothed_payoff_properties(delta):
    payoff = smooth_payoff(100.0, delta)
    outside = 100.0 + delta * np.array([-3.0, -1.0, 1.0, 2.5])
    np.testing.assert_allclose(payoff(outside), payoff.raw(outside), atol=1e-12 * delta)
    assert float(payoff(100.0)) == pytest.approx(delta / 18, rel=1e-12)
    # local integral of the correction vanishes (fourth-order kernel)
    diff, _ = integrate.quad(lambda s: float(payoff(s)) - max(s - 100.0, 0.0),
                             100.0 - delta, 100.0 + delta, points=[100.0], epsabs=1e-13)
    assert abs(diff) < 1e-10 * (1 + delta**2)
    x = 100.0 + delta * np.linspace(-0.99, 0.99, 9)
    fd = (payoff(x + 1e-6 * delta) - payoff(x - 1e-6 * delta)) / (2e-6 * delta)
    np.testing.assert_allclose(payoff.derivative(x), fd, atol=1e-6)


def test_black_scholes_auto_smoothing_uses_grid():
    p = black_scholes()
    grid = build_grid(1, (-8, 8), 1 / 32)
    resolved = p.for_grid(grid)
    assert resolved.params["smoothing"] == pytest.approx(8 * grid.dx[0] * 0.25 * 100.0)
    assert resolved.grid_hook is None
    x = np.array([[90.0], [100.0], [110.0]])
    np.testing.assert_allclose(resolved.terminal(x)[:, 0],
                               [0.0, resolved.params["smoothing"] / 18, 10.0], atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(s=st.floats(1.0, 500.0), h=st.floats(0.0, 2.0), inc=st.floats(-3.0, 3.0))
def test_gbm_step_is_exact_lognormal_map(s, h, inc):
    mu, sigma = 0.07, 0.3
    out = gbm_step(s, h, inc, mu, sigma)
    assert math.log(out) == pytest.approx(math.log(s) + (mu - sigma**2 / 2) * h + sigma * inc,
                                          abs=1e-12)
    # steps compose: two half steps equal one full step
    half = gbm_step(gbm_step(s, h / 2, inc / 2, mu, sigma), h / 2, inc / 2, mu, sigma)
    assert half == pytest.approx(out, rel=1e-13)


def test_gbm_mean():
    # E[S_h] = s exp(mu h) via Gauss-Hermite over the increment
    nodes, weights = np.polynomial.hermite.hermgauss(40)
    h = 0.5
    vals = gbm_step(100.0, h, math.sqrt(2 * h) * nodes, 0.1, 0.2)
    assert np.dot(weights, vals) / math.sqrt(math.pi) == pytest.approx(100 * math.exp(0.05), rel=1e-12)


def test_validation():
    with pytest.raises(ValueError):
        gbm_step(-1.0, 0.1, 0.0, 0.1, 0.2)
    with pytest.raises(ValueError):
        GBM(0.1, 0.0, 100.0)
    with pytest.raises(ValueError):
        smooth_payoff(100.0, 0.0)
    with pytest.raises(ValueError):
        black_scholes(sigma=-0.1)
    with pytest.raises(ValueError):
        make_problem("heston")
    with pytest.raises(ValueError):
        example1(T=0.0)


def test_registry_aliases():
    assert make_problem("BS").name == "black_scholes"
    assert make_problem("example-2d").d == 2
    assert make_problem("example1", T=0.5).T == 0.5
