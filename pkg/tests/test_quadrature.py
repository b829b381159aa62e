import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splinebsde.quadrature import MAX_ORDER, conditional_expectation, gauss_hermite, tensor_rule


def gaussian_moment(p: int, var: float) -> float:
    """E[W^p] for W ~ N(0, var): (p-1)!! var^(p/2) for even p."""
    if p % 2:
        return 0.0
    return math.prod(range(p - 1, 0, -2)) * var ** (p // 2)


@settings(max_examples=60, deadline=None)
@given(L=st.integers(1, 20), data=st.data())
def test_exact_to_degree_2L_minus_1(L, data):
    p = data.draw(st.integers(0, 2 * L - 1))
    span = data.draw(st.floats(0.01, 4.0))
    got = conditional_expectation(lambda w: w[:, 0] ** p, 0.0, span, L)
    exact = gaussian_moment(p, span)
    # odd moments cancel to zero; measure against the size of |W|^p
    scale = math.sqrt(gaussian_moment(2 * p, span))
    assert got == pytest.approx(exact, rel=1e-10, abs=1e-13 * max(1.0, scale))


@pytest.mark.parametrize("L", [2, 4, 8, 12])
def test_degree_2L_is_not_exact(L):
    got = conditional_expectation(lambda w: w[:, 0] ** (2 * L), 0.0, 1.0, L)
    assert abs(got - gaussian_moment(2 * L, 1.0)) > 1e-3


@pytest.mark.parametrize("L", [1, 5, 8, 32, 64])
def test_rule_structure(L):
    rule = gauss_hermite(L)
    assert rule.nodes.shape == rule.weights.shape == (L,)
    assert np.all(rule.weights > 0)
    assert np.sum(rule.weights) == pytest.approx(math.sqrt(math.pi), rel=1e-13)
    np.testing.assert_array_equal(rule.nodes, -rule.nodes[::-1])
    assert np.all(np.diff(rule.nodes) > 0)


def test_matches_numpy_rule():
    ours = gauss_hermite(16)
    nodes, weights = np.polynomial.hermite.hermgauss(16)
    np.testing.assert_allclose(ours.nodes, nodes, atol=1e-13)
    np.testing.assert_allclose(ours.weights, weights, rtol=1e-11)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-2, 2), x=st.floats(-3, 3), span=st.floats(0.01, 1.0))
def test_exponential_expectation(a, x, span):
    got = conditional_expectation(lambda w: np.exp(a * w[:, 0]), x, span, 16)
    assert got == pytest.approx(math.exp(a * x + a * a * span / 2), rel=1e-10)


def test_two_dimensional_product_moments():
    rule = tensor_rule(6, 2)
    assert rule.nodes.shape == (36, 2)
    span = 0.7
    for p in range(0, 6):
        for q in range(0, 6):
            got = conditional_expectation(lambda w: w[:, 0] ** p * w[:, 1] ** q, [0.0, 0.0],
                                          span, rule)
            exact = gaussian_moment(p, span) * gaussian_moment(q, span)
            assert got == pytest.approx(exact, abs=1e-11)


def test_vector_valued_integrand():
    got = conditional_expectation(lambda w: np.stack([w[:, 0], w[:, 0] ** 2], axis=1),
                                  1.0, 0.5, 4)
    np.testing.assert_allclose(got, [1.0, 1.5], atol=1e-13)


@pytest.mark.parametrize("bad", [0, -1, MAX_ORDER + 1, 2.5])
def test_invalid_order(bad):
    with pytest.raises(ValueError):
        gauss_hermite(bad)


def test_invalid_span_and_dimension():
    with pytest.raises(ValueError):
        conditional_expectation(lambda w: w[:, 0], 0.0, 0.0)
    with pytest.raises(ValueError):
        conditional_expectation(lambda w: w[:, 0], [0.0, 0.0], 1.0, tensor_rule(4, 3))
    with pytest.raises(ValueError):
        tensor_rule(4, 0)
