#!/usr/bin/env python3
# -*- coding: utf-8 -*-
"""
自动微分磁带测试
"""

import numpy as np
import pytest

from great.core.net import build_mlp, softmax_cross_entropy
from great.core.selftest import first_order_suite, hessian_vector, second_order_suite
from great.core.tape import (
    NonFiniteError, ShapeError, Tape, TapeError, Tensor, backward, conv2d, finite_difference_check,
    forward_op, grad, gradient_reversal, leaky_relu, log, matmul, no_grad, reduce_sum, relu,
)


def test_forward_examples():
    np.testing.assert_array_equal(forward_op("relu", [-1.0, 0.0, 2.0]).data, [0.0, 0.0, 2.0])
    np.testing.assert_allclose(forward_op("leaky_relu", [-1.0, 2.0], slope=0.2).data, [-0.2, 2.0])
    out = forward_op("matmul", np.ones((2, 3)), np.ones((3, 1)))
    np.testing.assert_array_equal(out.data, np.full((2, 1), 3.0))


def test_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(ShapeError, match="add"):
        forward_op("add", np.ones((2, 3)), np.ones(4))


def test_leaky_relu_slope_range():
    with pytest.raises(ValueError):
        leaky_relu([1.0], slope=1.5)


def test_results_bound_only_when_tracked():
    with Tape() as tape:
        a = Tensor([1.0, 2.0])
        b = a * 2.0
        assert b.node is None
        w = Tensor([1.0, 2.0], requires_grad=True)
        c = w * 2.0
        assert c.node is not None
        assert len(tape) == 1
        with no_grad():
            assert (w * 3.0).node is None


def test_square_gradient():
    with Tape():
        x = Tensor(3.0, requires_grad=True)
        (g,) = grad(x * x, [x])
    assert g.item() == pytest.approx(6.0)


def test_cube_second_derivative():
    with Tape():
        x = Tensor(2.0, requires_grad=True)
        (g,) = grad(x * x * x, [x], create_graph=True)
        assert g.node is not None
        (h,) = grad(g, [x])
    assert g.item() == pytest.approx(12.0)
    assert h.item() == pytest.approx(12.0, abs=1e-9)


def test_non_scalar_backward_rejected():
    with Tape():
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(TapeError):
            backward(x * 2.0, [x])


def test_unreachable_tensor_gets_zero_and_warning():
    with Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        unused = Tensor([5.0], requires_grad=True)
        grads = backward(reduce_sum(x * x), [x, unused])
    np.testing.assert_array_equal(grads[unused].data, [0.0])
    np.testing.assert_allclose(grads[x].data, [2.0, 4.0])
    assert len(tape.warnings) == 1


def test_gradient_reversal_examples():
    with Tape():
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        out = gradient_reversal(x, 1.0)
        np.testing.assert_array_equal(out.data, x.data)
        g = backward(reduce_sum(out * np.array([0.5, 0.5, -1.0])), [x])[x]
    np.testing.assert_array_equal(g.data, [-0.5, -0.5, 1.0])

    with Tape():
        x = Tensor([4.0], requires_grad=True)
        g = backward(reduce_sum(gradient_reversal(x, 0.5) * 2.0), [x])[x]
    np.testing.assert_array_equal(g.data, [-1.0])


def test_double_reversal_restores_signal():
    upstream = np.array([0.3, -1.7, 2.5])
    with Tape():
        x = Tensor(np.zeros(3), requires_grad=True)
        y = gradient_reversal(gradient_reversal(x, 1.0), 1.0)
        g = backward(reduce_sum(y * upstream), [x])[x]
    np.testing.assert_array_equal(g.data, upstream)


def test_relu_second_derivative_is_zero():
    w = np.array([1.5, -0.5, 2.0, 0.7])
    x = np.array([0.3, -1.2, 2.0, -0.1])
    hv = hessian_vector(lambda t: reduce_sum(relu(t) * w), x, np.ones(4))
    np.testing.assert_array_equal(hv, np.zeros(4))


def test_replay_is_deterministic():
    rng = np.random.default_rng(0)
    model = build_mlp((5,), [7], 3, seed=0)
    x = rng.normal(size=(4, 5))
    y = np.array([0, 1, 2, 1])
    params = list(model.parameters().values())
    with Tape():
        loss = softmax_cross_entropy(model(Tensor(x)), y).loss
        first = backward(loss, params)
        second = backward(loss, params)
    for p in params:
        np.testing.assert_array_equal(first[p].data, second[p].data)


def test_non_finite_forward_aborts():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with Tape():
        x = Tensor([-1.0], requires_grad=True)
        with pytest.raises(NonFiniteError) as info:
            log(x)
    assert info.value.kind == "log"


def test_finite_difference_examples():
    assert finite_difference_check(lambda t: reduce_sum(t), np.array([0.5, -2.0, 3.0])) < 1e-6
    assert finite_difference_check(lambda t: reduce_sum(t * t), np.array([1.0, 2.0])) < 1e-6

    model = build_mlp((3,), [4], 2, activation="leaky_relu", seed=3)
    labels = np.array([0, 1])

    def loss(t):
        return softmax_cross_entropy(model(t), labels).loss

    x = np.random.default_rng(1).normal(size=(2, 3))
    assert finite_difference_check(loss, x) < 1e-4


def test_conv2d_shapes_and_gradient():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 2, 4, 4))
    weight = rng.normal(size=(3, 2, 3, 3))
    assert conv2d(x, weight, stride=1).shape == (1, 3, 4, 4)
    assert conv2d(x, weight, stride=2).shape == (1, 3, 2, 2)
    with pytest.raises(ShapeError):
        conv2d(x, weight, stride=3)
    assert finite_difference_check(lambda t: reduce_sum(conv2d(t, weight, stride=2) * 0.5), x) < 1e-4


def test_random_graph_suites():
    assert first_order_suite(count=20)[0].passed
    results = second_order_suite(count=10)
    assert all(r.passed for r in results)
