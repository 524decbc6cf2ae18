import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_nilm.tensor_core import (
    ShapeError,
    finite_diff_gradient,
    matmul,
    relative_error,
    sigmoid,
    tanh_act,
)

finite = st.floats(min_value=-700, max_value=700, allow_nan=False)


def test_sigmoid_at_zero():
    assert sigmoid(0.0) == 0.5


def test_sigmoid_at_one_matches_high_precision():
    mpmath.mp.dps = 40
    expected = float(1 / (1 + mpmath.e ** -1))
    assert sigmoid(1.0) == pytest.approx(expected, rel=1e-15)
    assert expected == pytest.approx(0.7310585786, abs=1e-10)


@given(finite)
def test_sigmoid_symmetry(x):
    assert sigmoid(x) + sigmoid(-x) == pytest.approx(1.0, abs=1e-15)


@pytest.mark.parametrize("x", [-700.0, -100.0, 100.0, 700.0])
def test_sigmoid_no_overflow(x):
    with np.errstate(over="raise"):
        v = sigmoid(x)
    assert 0.0 <= v <= 1.0 and math.isfinite(v)


def test_tanh_values():
    mpmath.mp.dps = 40
    assert tanh_act(0.0) == 0.0
    assert tanh_act(1.0) == pytest.approx(float(mpmath.tanh(1)), rel=1e-15)


@given(st.floats(min_value=-50, max_value=50, allow_nan=False))
def test_tanh_odd(x):
    assert tanh_act(-x) == -tanh_act(x)


def test_activations_monotone_on_grid():
    grid = np.linspace(-40, 40, 4001)
    assert np.all(np.diff(sigmoid(grid)) >= 0)
    assert np.all(np.diff(tanh_act(grid)) >= 0)


def test_matmul_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, np.eye(2)), a)
    np.testing.assert_array_equal(matmul(a, [[5.0], [6.0]]), [[17.0], [39.0]])
    np.testing.assert_array_equal(matmul(np.zeros((3, 2)), a), np.zeros((3, 2)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\[2, 3\].*\[2, 2\]"):
        matmul(np.ones((2, 3)), np.ones((2, 2)))


@settings(max_examples=30)
@given(st.integers(0, 2**31 - 1))
def test_matmul_associative(seed):
    rng = np.random.default_rng(seed)
    m, k, n, p = rng.integers(1, 6, size=4)
    a, b, c = rng.normal(size=(m, k)), rng.normal(size=(k, n)), rng.normal(size=(n, p))
    left = matmul(matmul(a, b), c)
    right = matmul(a, matmul(b, c))
    scale = np.maximum(np.abs(left), 1.0)
    assert np.all(np.abs(left - right) / scale <= 1e-9)


def test_finite_diff_square():
    g = finite_diff_gradient(lambda p: float(p[0] ** 2), np.array([3.0]))
    assert g[0] == pytest.approx(6.0, abs=1e-6)


def test_finite_diff_constant_and_linear():
    p = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(finite_diff_gradient(lambda q: 4.2, p), np.zeros((2, 3)))
    np.testing.assert_allclose(finite_diff_gradient(lambda q: float(q.sum()), p), np.ones((2, 3)), atol=1e-9)


def test_finite_diff_does_not_mutate_input():
    p = np.array([1.0, 2.0])
    finite_diff_gradient(lambda q: float(q @ q), p)
    np.testing.assert_array_equal(p, [1.0, 2.0])


def test_finite_diff_rejects_nonpositive_eps():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda q: 0.0, np.zeros(1), eps=0.0)


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert relative_error(np.array([1e-12]), np.array([0.0]))[0] == pytest.approx(1e-4)
