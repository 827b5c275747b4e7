"""Layer operations against independent oracles and finite differences."""

import numpy as np
import pytest

from lprobe import ops
from lprobe.tensor import DimensionError, Tape, Tensor

from oracles import (conv2d_direct, finite_diff_probe, relative_error,
                     softmax_xent_longdouble)

RNG = np.random.default_rng(20240811)


# --- conv2d ---------------------------------------------------------------

def test_conv_scalar_kernel_scales_input():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.array([[[[2.0]]]]))
    out = ops.conv2d(x, w, stride=1, padding=0)
    assert np.array_equal(out.data, np.full((1, 1, 3, 3), 2.0))


def test_conv_zero_input_gives_zero_output():
    x = Tensor(np.zeros((2, 3, 5, 5)))
    w = Tensor(RNG.normal(size=(4, 3, 3, 3)))
    out = ops.conv2d(x, w, stride=1, padding=1)
    assert np.array_equal(out.data, np.zeros((2, 4, 5, 5)))


def test_conv_random_case_matches_direct_oracle():
    x = RNG.uniform(-1, 1, (2, 3, 5, 5))
    w = RNG.uniform(-1, 1, (4, 3, 3, 3))
    out = ops.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
    ref = conv2d_direct(x, w, stride=2, padding=1)
    assert np.abs(out - ref).max() < 1e-10


@pytest.mark.parametrize("shape", [
    # (n, c, o, h, w, k, stride, padding) sampled up to the 4x8x9x9 envelope
    (1, 1, 1, 3, 3, 1, 1, 0),
    (1, 2, 3, 4, 6, 2, 1, 0),
    (2, 3, 4, 7, 7, 3, 1, 1),
    (3, 4, 2, 8, 5, 3, 2, 1),
    (4, 8, 5, 9, 9, 3, 3, 2),
    (2, 5, 3, 9, 9, 5, 2, 2),
    (4, 8, 8, 9, 9, 1, 2, 0),
])
def test_conv_shape_envelope_matches_oracle(shape):
    n, c, o, h, w, k, stride, padding = shape
    x = RNG.uniform(-1, 1, (n, c, h, w))
    wt = RNG.uniform(-1, 1, (o, c, k, k))
    b = RNG.uniform(-1, 1, o)
    out = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b), stride=stride, padding=padding).data
    ref = conv2d_direct(x, wt, b, stride=stride, padding=padding)
    assert out.shape == ref.shape
    assert np.abs(out - ref).max() < 1e-10


def test_conv_shape_errors():
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))
    with pytest.raises(DimensionError):
        ops.conv2d(Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 3, 3))))
    with pytest.raises(ValueError):
        ops.conv2d(Tensor(np.ones((1, 1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), stride=0)


def _grad_check(build_loss, tensors, probes=4, tol=1e-4):
    for t in tensors:
        t.zero_grad()
    with Tape() as tape:
        loss = build_loss()
    tape.backward(loss)
    for t in tensors:
        flat_indices = RNG.choice(t.data.size, size=min(probes, t.data.size), replace=False)
        for flat in flat_indices:
            idx = np.unravel_index(flat, t.data.shape)
            fd = finite_diff_probe(lambda: float(build_loss().data), t.data, idx)
            assert relative_error(fd, t.grad[idx]) < tol, (t.data.shape, idx)


def test_conv_gradients_vs_finite_differences():
    x = Tensor(RNG.uniform(-1, 1, (2, 3, 6, 6)), requires_grad=True)
    w = Tensor(RNG.uniform(-1, 1, (4, 3, 3, 3)), requires_grad=True)
    b = Tensor(RNG.uniform(-1, 1, 4), requires_grad=True)
    _grad_check(lambda: ops.conv2d(x, w, b, stride=2, padding=1).sum(), [x, w, b])


# --- batchnorm ------------------------------------------------------------

def test_batchnorm_train_normalizes():
    x = Tensor(RNG.uniform(-2, 3, (4, 3, 5, 5)))
    gamma, beta = Tensor(np.ones(3)), Tensor(np.zeros(3))
    rm, rv = np.zeros(3), np.ones(3)
    out = ops.batchnorm2d(x, gamma, beta, rm, rv, train=True).data
    mean = out.mean(axis=(0, 2, 3))
    var = out.var(axis=(0, 2, 3))
    assert np.abs(mean).max() < 1e-6
    assert np.abs(var - 1).max() < 1e-5


def test_batchnorm_eval_identity_under_unit_stats():
    x = Tensor(RNG.uniform(-1, 1, (2, 3, 4, 4)))
    out = ops.batchnorm2d(x, Tensor(np.ones(3)), Tensor(np.zeros(3)),
                          np.zeros(3), np.ones(3), train=False, eps=1e-5).data
    assert np.abs(out - x.data).max() < 1e-5


def test_batchnorm_batch_of_one_rejected_in_train():
    x = Tensor(np.ones((1, 2, 3, 3)))
    with pytest.raises(ValueError):
        ops.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)),
                        np.zeros(2), np.ones(2), train=True)


def test_batchnorm_updates_running_stats():
    x = Tensor(RNG.uniform(0, 4, (8, 2, 3, 3)))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                    train=True, momentum=0.1)
    mu = x.data.mean(axis=(0, 2, 3))
    m = 8 * 9
    var_unbiased = x.data.var(axis=(0, 2, 3)) * m / (m - 1)
    assert np.allclose(rm, 0.1 * mu)
    assert np.allclose(rv, 0.9 + 0.1 * var_unbiased)


def test_batchnorm_stats_not_updated_when_flagged():
    x = Tensor(RNG.uniform(0, 4, (8, 2, 3, 3)))
    rm, rv = np.zeros(2), np.ones(2)
    ops.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv,
                    train=True, update_stats=False)
    assert np.array_equal(rm, np.zeros(2)) and np.array_equal(rv, np.ones(2))


def test_batchnorm_train_gradients_vs_finite_differences():
    x = Tensor(RNG.uniform(-1, 1, (2, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(RNG.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(RNG.uniform(-0.5, 0.5, 3), requires_grad=True)
    rm, rv = np.zeros(3), np.ones(3)
    weights = Tensor(RNG.normal(size=(2, 3, 4, 4)))

    def build():
        out = ops.batchnorm2d(x, gamma, beta, rm.copy(), rv.copy(), train=True)
        return (out * weights).sum()

    _grad_check(build, [x, gamma, beta], probes=6)


def test_batchnorm_eval_gradients_vs_finite_differences():
    x = Tensor(RNG.uniform(-1, 1, (2, 3, 4, 4)), requires_grad=True)
    gamma = Tensor(RNG.uniform(0.5, 1.5, 3), requires_grad=True)
    beta = Tensor(RNG.uniform(-0.5, 0.5, 3), requires_grad=True)
    rm, rv = RNG.normal(size=3), RNG.uniform(0.5, 2.0, 3)
    weights = Tensor(RNG.normal(size=(2, 3, 4, 4)))

    def build():
        out = ops.batchnorm2d(x, gamma, beta, rm, rv, train=False)
        return (out * weights).sum()

    _grad_check(build, [x, gamma, beta], probes=6)


# --- relu / pooling / linear / residual ------------------------------------

def test_relu_values():
    out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_global_avg_pool_example():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]], [[0.0, 0.0], [0.0, 8.0]]]]))
    out = ops.global_avg_pool(x)
    assert np.array_equal(out.data, [[2.5, 2.0]])


def test_maxpool_values_and_window_rule():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out = ops.maxpool2d(Tensor(x), 2)
    assert np.array_equal(out.data, [[[[5.0, 7.0], [13.0, 15.0]]]])
    with pytest.raises(DimensionError):
        ops.maxpool2d(Tensor(np.ones((1, 1, 5, 5))), 2)


def test_maxpool_backward_routes_to_argmax():
    x = Tensor(RNG.uniform(-1, 1, (2, 3, 4, 4)), requires_grad=True)
    weights = Tensor(RNG.normal(size=(2, 3, 2, 2)))

    def build():
        return (ops.maxpool2d(x, 2) * weights).sum()

    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    # gradient lands only on argmax positions: at most one nonzero per window
    windows = x.grad.reshape(2, 3, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    nonzero_per_window = (windows.reshape(2, 3, 2, 2, 4) != 0).sum(axis=-1)
    assert nonzero_per_window.max() <= 1
    _grad_check(build, [x], probes=8)


def test_linear_matches_manual_affine():
    x = RNG.uniform(-1, 1, (3, 4))
    w = RNG.normal(size=(5, 4))
    b = RNG.normal(size=5)
    out = ops.linear(Tensor(x), Tensor(w), Tensor(b)).data
    assert np.allclose(out, x @ w.T + b, atol=1e-12)


def test_linear_gradients():
    x = Tensor(RNG.uniform(-1, 1, (3, 4)), requires_grad=True)
    w = Tensor(RNG.normal(size=(5, 4)), requires_grad=True)
    b = Tensor(RNG.normal(size=5), requires_grad=True)
    weights = Tensor(RNG.normal(size=(3, 5)))
    _grad_check(lambda: (ops.linear(x, w, b) * weights).sum(), [x, w, b])


def test_residual_add_requires_same_shape():
    with pytest.raises(DimensionError):
        ops.residual_add(Tensor(np.ones((1, 2))), Tensor(np.ones((2, 1))))


def test_residual_add_gradients_flow_to_both():
    a = Tensor(np.ones((2, 2)), requires_grad=True)
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ops.residual_add(a, b).sum()
    tape.backward(loss)
    assert np.array_equal(a.grad, np.ones((2, 2)))
    assert np.array_equal(b.grad, np.ones((2, 2)))


# --- softmax cross entropy --------------------------------------------------

def test_xent_uniform_logits():
    logits = Tensor(np.zeros((4, 10)))
    loss = ops.softmax_cross_entropy(logits, np.array([0, 3, 5, 9]))
    assert abs(float(loss.data) - np.log(10)) < 1e-12


def test_xent_huge_logit_is_stable():
    logits = np.zeros((1, 5))
    logits[0, 2] = 1000.0
    loss = ops.softmax_cross_entropy(Tensor(logits), np.array([2]))
    assert 0.0 <= float(loss.data) < 1e-6


def test_xent_matches_longdouble_formula():
    logits = RNG.uniform(-3, 3, (4, 5))
    labels = np.array([0, 2, 4, 1])
    got = float(ops.softmax_cross_entropy(Tensor(logits), labels).data)
    ref = softmax_xent_longdouble(logits, labels)
    assert abs(got - ref) < 1e-10


def test_xent_label_out_of_range():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_xent_gradients():
    logits = Tensor(RNG.uniform(-2, 2, (4, 6)), requires_grad=True)
    labels = np.array([1, 0, 5, 3])
    _grad_check(lambda: ops.softmax_cross_entropy(logits, labels), [logits], probes=8)
