"""Backward-pass correctness: analytic cases plus the finite-difference suite."""

import numpy as np
import pytest

from segan import tensor as T
from segan.gradcheck import end_to_end_checks, primitive_checks
from segan.tensor import GradError, Tape, Tensor, backward


def test_grad_of_sum_is_ones():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(x)
    backward(tape, loss)
    assert np.array_equal(x.grad, np.ones(3))


def test_grad_of_sum_of_squares():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.elementwise_mul(x, x))
    backward(tape, loss)
    assert np.allclose(x.grad, [2.0, 4.0])


def test_add_gradient_is_ones_for_both_inputs():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    y = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.elementwise_add(x, y))
    backward(tape, loss)
    assert np.array_equal(x.grad, np.ones((1, 1, 2, 2)))
    assert np.array_equal(y.grad, np.ones((1, 1, 2, 2)))


def test_maxpool_gradient_is_one_hot_per_window():
    rng = np.random.default_rng(0)
    x = Tensor(rng.permutation(16).astype(np.float64).reshape(1, 1, 4, 4),
               requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.maxpool2x(x))
    backward(tape, loss)
    assert set(np.unique(x.grad)) == {0.0, 1.0}
    # rows of this view are the flattened 2x2 windows
    per_window = x.grad.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(4, 4)
    assert per_window.sum(axis=1).tolist() == [1.0, 1.0, 1.0, 1.0]


def test_maxpool_tie_routes_to_first_row_major():
    x = Tensor(np.full((1, 1, 2, 2), 3.0), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.maxpool2x(x))
    backward(tape, loss)
    expected = np.zeros((1, 1, 2, 2))
    expected[0, 0, 0, 0] = 1.0
    assert np.array_equal(x.grad, expected)


def test_upsample_gradient_sums_blocks():
    x = Tensor(np.zeros((1, 1, 2, 2)), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.upsample_nearest2x(x))
    backward(tape, loss)
    assert np.array_equal(x.grad, np.full((1, 1, 2, 2), 4.0))


def test_global_avg_pool_gradient_uniform():
    x = Tensor(np.zeros((1, 2, 4, 4)), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.global_avg_pool(x))
    backward(tape, loss)
    assert np.allclose(x.grad, 1.0 / 16.0)


def test_fanout_gradients_accumulate():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.elementwise_add(x, x)  # d/dx (x + x) = 2
    backward(tape, loss)
    assert np.array_equal(x.grad, [2.0])


def test_repeated_backward_accumulates_then_reproduces_after_zeroing():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        loss = T.reduce_sum(T.elementwise_mul(x, x))
    backward(tape, loss)
    first = x.grad.copy()
    backward(tape, loss)
    assert np.array_equal(x.grad, 2 * first)
    x.zero_grad()
    backward(tape, loss)
    assert np.array_equal(x.grad, first)


def test_backward_requires_scalar_loss():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        out = T.elementwise_add(x, x)
    with pytest.raises(GradError, match="scalar"):
        backward(tape, out)


def test_backward_rejects_foreign_loss():
    x = Tensor(np.ones(2), requires_grad=True)
    with Tape() as tape_a:
        loss = T.reduce_sum(x)
    with Tape():
        pass
    other = Tape()
    with pytest.raises(GradError, match="tape"):
        backward(other, loss)


def test_detach_blocks_gradients():
    x = Tensor(np.array([2.0]), requires_grad=True)
    with Tape() as tape:
        y = T.scale(x, 3.0)
        z = T.reduce_sum(y.detach())
        loss = T.elementwise_add(z, T.reduce_sum(x))
    backward(tape, loss)
    assert np.array_equal(x.grad, [1.0])  # only the direct path contributes


def test_primitive_finite_difference_suite():
    results = primitive_checks()
    failed = [r.line() for r in results if not r.ok]
    assert not failed, "\n".join(failed)


def test_end_to_end_composite_loss_gradient():
    results = end_to_end_checks()
    failed = [r.line() for r in results if not r.ok]
    assert not failed, "\n".join(failed)


def test_backward_determinism_on_network_loss():
    from segan.model import ChannelPlan, build_generator
    from segan.training import LossFlags, LossWeights, g_loss

    plan = ChannelPlan(stage_channels=[4, 8, 16, 32, 64])
    rng = np.random.default_rng(9)
    image = Tensor(rng.uniform(0, 1, (2, 3, 16, 16)))
    vessel = Tensor((rng.uniform(0, 1, (2, 1, 16, 16)) > 0.8).astype(np.float64))
    grads = []
    for _ in range(2):
        g = build_generator(plan, 11)
        with Tape() as tape:
            loss = g_loss(g, None, image, vessel, LossWeights(),
                          LossFlags(use_gan_loss=False), mode="train")
        backward(tape, loss)
        grads.append(np.concatenate([p.grad.reshape(-1) for p in g.params()]))
    assert np.array_equal(grads[0], grads[1])
