"""Tests for the tensor math, backward passes and the gradient oracle."""
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import special

import numerics as nx
from errors import DomainError, GradCheckEvaluationError, ShapeError


def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(nx.matmul(np.eye(2), m).value, m)
    out = nx.matmul(np.array([[1.0, 0.0], [0.0, 0.0]]), np.array([[5.0, 6.0], [7.0, 8.0]]))
    assert np.array_equal(out.value, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    expected = np.zeros((3, 2))
    for i in range(3):
        for j in range(2):
            for k in range(4):
                expected[i, j] += a[i, k] * b[k, j]
    with nx.precision("double"):
        out = nx.matmul(a, b).value
    assert np.max(np.abs(out - expected)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as info:
        nx.matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    assert "(2, 3)" in str(info.value) and "(4, 2)" in str(info.value)


def test_matmul_backward():
    with nx.precision("double"):
        a = nx.parameter(np.array([[1.0, 2.0], [3.0, 4.0]]), "a")
        b = nx.parameter(np.array([[0.5, -1.0], [2.0, 1.0]]), "b")
        nx.sum(nx.matmul(a, b)).backward()
        g = np.ones((2, 2))
        assert np.allclose(a.grad, g @ b.value.T)
        assert np.allclose(b.grad, a.value.T @ g)


def test_unsupported_broadcast_is_shape_error():
    with pytest.raises(ShapeError):
        nx.add(np.zeros((3, 1)), np.zeros((1, 4)))


def test_softmax_with_bias_examples():
    with nx.precision("double"):
        assert np.allclose(nx.softmax_with_bias([0.0, 0.0], [0.0, 0.0]).value, [0.5, 0.5])
        out = nx.softmax_with_bias([0.0, 0.0], [0.0, -10.0]).value
    assert out[0] == pytest.approx(0.9999546, abs=1e-7)
    assert out[1] == pytest.approx(4.5398e-5, rel=1e-4)


def test_zero_bias_equals_plain_softmax_bitwise(rng):
    logits = rng.normal(size=(2, 3, 5))
    for mode in ("single", "double"):
        with nx.precision(mode):
            plain = nx.softmax(logits).value
            biased = nx.softmax_with_bias(logits, np.zeros((3, 5))).value
        assert np.array_equal(plain, biased)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.lists(st.floats(-10, 0), min_size=8, max_size=8))
def test_softmax_rows_sum_to_one(logits, bias):
    with nx.precision("double"):
        out = nx.softmax_with_bias(np.array(logits), np.array(bias[:len(logits)])).value
    assert abs(out.sum() - 1.0) < 1e-9
    assert np.all(np.isfinite(out))


def test_elementwise_examples():
    with nx.precision("double"):
        assert nx.sigmoid(0.0).item() == 0.5
        assert nx.relu(-3.0).item() == 0.0
        reference = 1.0 * 0.5 * (1.0 + special.erf(1.0 / math.sqrt(2.0)))
        assert abs(nx.gelu(1.0).item() - reference) < 1e-6


def test_log_of_non_positive_is_domain_error():
    with pytest.raises(DomainError):
        nx.log(np.array([1.0, 0.0]))
    with pytest.raises(DomainError):
        nx.sqrt(np.array([-1.0]))


def test_backward_zeroes_gradients_first():
    with nx.precision("double"):
        x = nx.parameter(np.array([2.0]), "x")
        y = x * x
        y.backward()
        y.backward()
        assert x.grad[0] == pytest.approx(4.0)


def test_repeated_take_accumulates_gradient():
    with nx.precision("double"):
        x = nx.parameter(np.arange(3.0), "x")
        nx.sum(nx.take(x, [0, 0, 2])).backward()
        assert np.array_equal(x.grad, [2.0, 0.0, 1.0])


def test_no_grad_builds_no_graph():
    x = nx.parameter(np.ones(3), "x")
    with nx.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_precision_is_scoped():
    before = nx.get_precision()
    with nx.precision("double"):
        assert nx.float_dtype() == np.float64
    assert nx.get_precision() == before


def test_grad_check_half_squared_norm():
    error = nx.grad_check(lambda t: nx.sum(t * t) * 0.5, np.array([1.0, 2.0, 3.0]))
    assert error < 1e-7


def test_grad_check_softmax_cross_entropy(rng):
    target = 2

    def f(t):
        return -nx.log(nx.softmax_with_bias(t, np.zeros(4))[target])

    assert nx.grad_check(f, rng.normal(size=4)) < 1e-4


def test_grad_check_reports_non_finite():
    with pytest.raises(GradCheckEvaluationError):
        nx.grad_check(lambda t: nx.sum(t ** 0.5), np.array([5e-6, 1.0]))


def test_layer_norm_rows_are_normalized(rng):
    with nx.precision("double"):
        out = nx.layer_norm(rng.normal(size=(4, 6)) * 3.0 + 1.0, np.ones(6), np.zeros(6)).value
    assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-9)
    assert np.allclose(out.std(axis=-1), 1.0, atol=1e-4)


def test_forward_ops_are_deterministic(rng):
    x = rng.normal(size=(3, 5))
    first = nx.gelu(nx.matmul(x, x.T)).value
    second = nx.gelu(nx.matmul(x, x.T)).value
    assert np.array_equal(first, second)
