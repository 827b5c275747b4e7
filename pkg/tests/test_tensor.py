"""Autodiff core: tape mechanics, arithmetic gradients, finite checks."""

import numpy as np
import pytest

from lprobe import ops
from lprobe.tensor import (DimensionError, Tape, Tensor, backward,
                           no_grad_params, set_finite_checks)

from oracles import finite_diff_probe, relative_error


def test_sum_gradient_is_ones():
    x = Tensor(np.random.default_rng(0).normal(size=(3, 4, 5)), requires_grad=True)
    with Tape():
        loss = x.sum()
    backward(loss)
    assert np.array_equal(x.grad, np.ones_like(x.data))


def test_sum_of_squares_gradient():
    x = Tensor(np.random.default_rng(1).normal(size=(6, 7)), requires_grad=True)
    with Tape():
        loss = (x * x).sum()
    backward(loss)
    assert np.allclose(x.grad, 2 * x.data, rtol=0, atol=0)


def test_fanout_accumulates_exact_sum():
    x = Tensor(np.arange(4.0), requires_grad=True)
    with Tape():
        a = x * 3.0
        b = x * 5.0
        loss = (a + b).sum()
    backward(loss)
    assert np.array_equal(x.grad, np.full(4, 8.0))


def test_node_used_twice_gets_summed_gradient():
    x = Tensor(np.array([2.0, -1.0]), requires_grad=True)
    with Tape():
        y = x * x  # x used twice in one op
        loss = y.sum()
    backward(loss)
    assert np.array_equal(x.grad, 2 * x.data)


def test_backward_requires_scalar():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
    with pytest.raises(DimensionError):
        tape.backward(y)


def test_backward_requires_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = x.sum()  # no tape active: nothing recorded
    with pytest.raises(ValueError):
        backward(loss)


def test_elementwise_shape_mismatch():
    a = Tensor(np.ones((2, 3)))
    b = Tensor(np.ones((3, 2)))
    with pytest.raises(DimensionError):
        a + b
    with pytest.raises(DimensionError):
        a * b


def test_scalar_operand_broadcast():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape():
        loss = (x * 3.0).sum()
    backward(loss)
    assert np.array_equal(x.grad, np.full((2, 2), 3.0))


def test_no_recording_without_tape():
    x = Tensor(np.ones(4), requires_grad=True)
    y = x * 2.0
    assert y._tape is None


def test_no_grad_params_suppresses_weight_grads():
    w = Tensor(np.ones((2, 2)), requires_grad=True)
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with no_grad_params([w]):
        with Tape() as tape:
            loss = (x * w).sum()
        tape.backward(loss)
    assert w.grad is None
    assert x.grad is not None
    assert w.requires_grad  # restored on exit


def test_gradient_accumulates_across_backwards():
    x = Tensor(np.ones(3), requires_grad=True)
    for _ in range(2):
        with Tape() as tape:
            loss = (x * x).sum()
        tape.backward(loss)
    assert np.array_equal(x.grad, 4 * x.data)


def test_finite_checks_mode():
    set_finite_checks(True)
    try:
        with pytest.raises(FloatingPointError):
            Tensor(np.array([1.0, np.inf]))
    finally:
        set_finite_checks(False)
    # disabled mode accepts non-finite data (the training loop handles it)
    Tensor(np.array([np.nan]))


def test_mean_gradient():
    x = Tensor(np.random.default_rng(2).normal(size=10), requires_grad=True)
    with Tape():
        loss = x.mean()
    backward(loss)
    assert np.allclose(x.grad, np.full(10, 0.1))


def test_arithmetic_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    y = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)

    def run():
        with Tape() as tape:
            loss = ((x * y + x) * (x - y)).sum()
        return tape, loss

    tape, loss = run()
    tape.backward(loss)
    for tensor in (x, y):
        for idx in [(0, 0), (1, 2), (3, 1)]:
            fd = finite_diff_probe(lambda: float(run()[1].data), tensor.data, idx)
            assert relative_error(fd, tensor.grad[idx]) < 1e-6


def test_forward_determinism():
    rng = np.random.default_rng(4)
    x = rng.uniform(-1, 1, (2, 3, 8, 8))
    w = rng.normal(size=(4, 3, 3, 3))
    a = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
    b = ops.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
    assert np.array_equal(a, b)
