"""Forward semantics of the tensor primitives."""

import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from segan import tensor as T
from segan.tensor import BnState, ShapeError, Tensor


def test_conv2d_sum_of_ones():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.ones((1, 1, 2, 2)))
    b = Tensor(np.zeros(1))
    out = T.conv2d(x, w, b, stride=1, pad=0)
    assert out.shape == (1, 1, 2, 2)
    assert np.array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1, 1, (2, 1, 5, 5)))
    kernel = np.zeros((1, 1, 3, 3))
    kernel[0, 0, 1, 1] = 1.0
    out = T.conv2d(x, Tensor(kernel), Tensor(np.zeros(1)), stride=1, pad=1)
    assert np.array_equal(out.data, x.data)


def test_conv2d_output_shape_formula():
    x = Tensor(np.zeros((1, 2, 8, 12)))
    w = Tensor(np.zeros((5, 2, 3, 3)))
    out = T.conv2d(x, w, Tensor(np.zeros(5)), stride=1, pad=1)
    assert out.shape == (1, 5, 8, 12)
    out = T.conv2d(Tensor(np.zeros((1, 2, 8, 8))), Tensor(np.zeros((5, 2, 2, 2))),
                   Tensor(np.zeros(5)), stride=2, pad=0)
    assert out.shape == (1, 5, 4, 4)


def test_conv2d_channel_mismatch_names_dimension():
    x = Tensor(np.zeros((1, 3, 4, 4)))
    w = Tensor(np.zeros((2, 4, 3, 3)))
    with pytest.raises(ShapeError, match="channels"):
        T.conv2d(x, w, Tensor(np.zeros(2)), 1, 1)


def test_maxpool_window_max_and_constant():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.maxpool2x(x)
    assert out.data.reshape(-1)[0] == 4.0
    const = Tensor(np.full((1, 2, 4, 4), 7.5))
    assert np.array_equal(T.maxpool2x(const).data, np.full((1, 2, 2, 2), 7.5))


def test_maxpool_rejects_odd_dims():
    with pytest.raises(ShapeError, match="even"):
        T.maxpool2x(Tensor(np.zeros((1, 1, 3, 4))))


def test_upsample_replicates_blocks():
    x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
    out = T.upsample_nearest2x(x)
    expected = np.array([
        [1, 1, 2, 2],
        [1, 1, 2, 2],
        [3, 3, 4, 4],
        [3, 3, 4, 4],
    ], dtype=np.float64).reshape(1, 1, 4, 4)
    assert np.array_equal(out.data, expected)
    assert out.data.sum() == 4.0 * x.data.sum()


def test_batchnorm_constant_channel_maps_to_beta():
    x = Tensor(np.full((2, 3, 4, 4), 5.0))
    gamma = Tensor(np.ones(3))
    beta = Tensor(np.zeros(3))
    out = T.batchnorm2d(x, gamma, beta, BnState.for_channels(3), "train")
    assert np.allclose(out.data, 0.0)


def test_batchnorm_normalizes_to_affine_moments():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(3.0, 2.0, (4, 2, 8, 8)))
    gamma = Tensor(np.array([1.5, 0.5]))
    beta = Tensor(np.array([-1.0, 2.0]))
    out = T.batchnorm2d(x, gamma, beta, BnState.for_channels(2), "train")
    mean = out.data.mean(axis=(0, 2, 3))
    var = out.data.var(axis=(0, 2, 3))
    assert np.allclose(mean, beta.data, atol=1e-12)
    assert np.allclose(var, gamma.data ** 2, rtol=1e-4)  # eps-limited


def test_batchnorm_updates_running_stats():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(1.0, 1.0, (2, 2, 4, 4)))
    state = BnState.for_channels(2)
    T.batchnorm2d(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), state, "train")
    batch_mean = x.data.mean(axis=(0, 2, 3))
    assert np.allclose(state.running_mean, 0.1 * batch_mean)


def test_batchnorm_channel_mismatch():
    with pytest.raises(ShapeError):
        T.batchnorm2d(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.ones(2)),
                      Tensor(np.zeros(2)), BnState.for_channels(2), "train")


def test_activation_examples():
    out = T.activation(Tensor(np.array([-1.0, 2.0])), "relu")
    assert np.array_equal(out.data, [0.0, 2.0])
    sig = T.activation(Tensor(np.array([0.0])), "sigmoid")
    assert sig.data[0] == 0.5


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=32))
def test_sigmoid_strictly_inside_unit_interval(values):
    out = T.activation(Tensor(np.array(values)), "sigmoid")
    assert (out.data > 0.0).all() and (out.data < 1.0).all()


@given(st.lists(st.floats(min_value=-1e6, max_value=1e6), min_size=1, max_size=32))
def test_relu_nonnegative(values):
    out = T.activation(Tensor(np.array(values)), "relu")
    assert (out.data >= 0.0).all()


def test_concat_channel_counts_and_identity():
    a = Tensor(np.random.default_rng(0).uniform(size=(1, 2, 3, 3)))
    b = Tensor(np.random.default_rng(1).uniform(size=(1, 3, 3, 3)))
    out = T.concat_channels([a, b])
    assert out.shape == (1, 5, 3, 3)
    single = T.concat_channels([a])
    assert np.array_equal(single.data, a.data)


def test_concat_roundtrip_slices_recover_inputs():
    rng = np.random.default_rng(3)
    parts = [Tensor(rng.uniform(size=(2, c, 4, 5))) for c in (1, 4, 2)]
    out = T.concat_channels(parts)
    offset = 0
    for p in parts:
        c = p.shape[1]
        assert np.array_equal(out.data[:, offset:offset + c], p.data)
        offset += c


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        T.concat_channels([Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 5)))])


def test_elementwise_add_examples():
    x = Tensor(np.array([1.0, 2.0]))
    assert np.array_equal(T.elementwise_add(x, Tensor(np.array([3.0, 4.0]))).data, [4.0, 6.0])
    assert np.array_equal(T.elementwise_add(x, Tensor(np.zeros(2))).data, x.data)
    with pytest.raises(ShapeError):
        T.elementwise_add(x, Tensor(np.zeros(3)))


def test_channel_scale_identity_and_zero():
    rng = np.random.default_rng(4)
    x = Tensor(rng.uniform(size=(2, 3, 4, 4)))
    assert np.array_equal(T.channel_scale(x, Tensor(np.ones(3))).data, x.data)
    assert np.array_equal(T.channel_scale(x, Tensor(np.zeros(3))).data, np.zeros_like(x.data))
    with pytest.raises(ShapeError):
        T.channel_scale(x, Tensor(np.ones(4)))


def test_channel_group_sum_adjacent_planes():
    planes = np.stack([np.full((2, 2), v) for v in (1.0, 2.0, 3.0, 4.0)])[None]
    out = T.channel_group_sum(Tensor(planes), 2)
    assert out.shape == (1, 2, 2, 2)
    assert np.array_equal(out.data[0, 0], np.full((2, 2), 3.0))
    assert np.array_equal(out.data[0, 1], np.full((2, 2), 7.0))


def test_channel_group_sum_full_collapse_and_divisibility():
    rng = np.random.default_rng(5)
    x = Tensor(rng.uniform(size=(1, 6, 3, 3)))
    collapsed = T.channel_group_sum(x, 6)
    assert collapsed.shape == (1, 1, 3, 3)
    assert np.allclose(collapsed.data[0, 0], x.data.sum(axis=1)[0])
    with pytest.raises(ShapeError, match="divisible"):
        T.channel_group_sum(x, 4)


@given(st.integers(0, 2 ** 31), st.sampled_from([1, 2, 3, 6]))
def test_channel_group_sum_preserves_total_sum_exactly(seed, k):
    # integer-valued payloads make every addition order exact in f64
    rng = np.random.default_rng(seed)
    x = rng.integers(-50, 50, size=(2, 6, 3, 3)).astype(np.float64)
    out = T.channel_group_sum(Tensor(x), k)
    assert out.data.sum() == x.sum()


def test_global_avg_pool_examples():
    plane = np.array([[1.0, 3.0], [5.0, 7.0]]).reshape(1, 1, 2, 2)
    assert T.global_avg_pool(Tensor(plane)).data[0, 0] == 4.0
    const = Tensor(np.full((2, 3, 4, 4), 2.5))
    assert np.array_equal(T.global_avg_pool(const).data, np.full((2, 3), 2.5))


def test_bce_loss_values():
    ln2 = math.log(2.0)
    p = Tensor(np.array([0.5]))
    y = Tensor(np.array([1.0]))
    assert abs(T.bce_loss(p, y, 1e-7).item() - ln2) < 1e-12
    clamped = T.bce_loss(Tensor(np.array([1.0])), y, 1e-7).item()
    assert 0.0 < clamped <= 2e-7
    with pytest.raises(ShapeError):
        T.bce_loss(Tensor(np.zeros(2)), Tensor(np.zeros(3)), 1e-7)
    with pytest.raises(ValueError):
        T.bce_loss(p, y, 0.7)


def test_mae_loss_values():
    p = Tensor(np.array([0.75, 0.25]))
    y = Tensor(np.array([1.0, 0.0]))
    assert T.mae_loss(p, y).item() == 0.25
    assert T.mae_loss(y, y).item() == 0.0


def test_forward_ops_deterministic():
    rng = np.random.default_rng(6)
    x = rng.uniform(size=(2, 4, 6, 6))
    w = rng.uniform(size=(3, 4, 3, 3))
    a = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), 1, 1).data
    b = T.conv2d(Tensor(x), Tensor(w), Tensor(np.zeros(3)), 1, 1).data
    assert np.array_equal(a, b)
    assert np.array_equal(T.maxpool2x(Tensor(x)).data, T.maxpool2x(Tensor(x)).data)


def test_tensor_rank_limits():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 1, 1, 1, 1)))
    scalar = Tensor(5.0)
    assert scalar.shape == (1,)
