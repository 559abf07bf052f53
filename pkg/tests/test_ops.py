import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from freconv import ops
from freconv.errors import ParameterError, ShapeError
from freconv.ops import BNStats, ConvParams, ConvSpec
from freconv.tensor import Rng


def fd(f, arr, eps=1e-5):
    g = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + eps
        fp = f()
        arr[idx] = old - eps
        fm = f()
        arr[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def close(a, b, tol):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)) < tol


# -- convolution ---------------------------------------------------------------

def test_identity_kernel():
    x = Rng(0).normal(0, 1, (2, 1, 4, 5))
    out = ops.conv2d_forward(x, ConvSpec(1, 1, 1), ConvParams(np.ones((1, 1, 1, 1))))
    assert np.array_equal(out, x)


def test_summation_kernel():
    out = ops.conv2d_forward(np.ones((1, 1, 3, 3)), ConvSpec(1, 1, 3), ConvParams(np.ones((1, 1, 3, 3))))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 9


def test_dilated_grouped_matches_direct():
    rng = Rng(1)
    spec = ConvSpec(4, 4, 3, 1, 2, 2, 2)
    x = rng.normal(0, 1, (2, 4, 8, 8))
    p = ConvParams(rng.normal(0, 1, spec.weight_shape))
    fast, slow = ops.conv2d_forward(x, spec, p), ops.conv2d_direct(x, spec, p)
    assert fast.shape == (2, 4, 8, 8)
    assert np.max(np.abs(fast - slow) / np.maximum(np.abs(slow), 1e-12)) < 1e-6


def test_grouped_equals_sliced_convs():
    rng = Rng(2)
    spec = ConvSpec(8, 12, 3, 1, 1, 1, 4)
    x = rng.normal(0, 1, (1, 8, 6, 6))
    w = rng.normal(0, 1, spec.weight_shape)
    full = ops.conv2d_forward(x, spec, ConvParams(w))
    parts = [ops.conv2d_forward(x[:, 2 * i:2 * i + 2], ConvSpec(2, 3, 3, 1, 1), ConvParams(w[3 * i:3 * i + 3]))
             for i in range(4)]
    assert np.allclose(full, np.concatenate(parts, axis=1), atol=1e-12)


@settings(max_examples=80, deadline=None)
@given(k=st.sampled_from([1, 3, 5]), r=st.integers(1, 3), g=st.sampled_from([1, 2, 4]), s=st.integers(1, 2),
       p=st.integers(0, 3), extra=st.integers(0, 4), seed=st.integers(0, 10 ** 6), bias=st.booleans())
def test_forward_matches_direct_property(k, r, g, s, p, extra, seed, bias):
    rng = Rng(seed)
    spec = ConvSpec(g, 2 * g, k, s, p, r, g, bias)
    side = max(1, spec.effective_kernel - 2 * p + extra)
    x = rng.normal(0, 1, (1, g, side, side + 1))
    params = ConvParams(rng.normal(0, 1, spec.weight_shape), rng.normal(0, 1, (2 * g,)) if bias else None)
    fast, slow = ops.conv2d_forward(x, spec, params), ops.conv2d_direct(x, spec, params)
    assert fast.shape[2:] == spec.output_hw(side, side + 1)
    assert np.allclose(fast, slow, rtol=1e-9, atol=1e-9)


def test_shape_errors():
    spec = ConvSpec(2, 2, 3)
    p = ConvParams(np.zeros(spec.weight_shape))
    with pytest.raises(ShapeError, match="channel"):
        ops.conv2d_forward(np.zeros((1, 3, 5, 5)), spec, p)
    with pytest.raises(ShapeError):
        ops.conv2d_forward(np.zeros((1, 2, 2, 2)), spec, p)


def test_spec_validation():
    with pytest.raises(ParameterError):
        ConvSpec(3, 4, 3, groups=2)
    with pytest.raises(ParameterError):
        ConvSpec(2, 2, 4)
    assert ConvSpec(2, 2, 3, dilation=3).effective_kernel == 7
    assert ConvSpec.same(4, 4, 5, dilation=2).padding == 4


def test_backward_zero_and_identity():
    rng = Rng(3)
    spec = ConvSpec(2, 2, 3, padding=1, has_bias=True)
    x = rng.normal(0, 1, (1, 2, 5, 5))
    params = ConvParams(rng.normal(0, 1, spec.weight_shape), np.zeros(2))
    gx, gw, gb = ops.conv2d_backward(x, spec, params, np.zeros((1, 2, 5, 5)))
    assert not gx.any() and not gw.any() and not gb.any()
    up = rng.normal(0, 1, x.shape)
    gx, _, gb = ops.conv2d_backward(x, ConvSpec(2, 2, 1), ConvParams(np.eye(2).reshape(2, 2, 1, 1)), up)
    assert np.allclose(gx, up) and gb is None


@pytest.mark.parametrize("spec", [ConvSpec(2, 3, 3), ConvSpec(4, 4, 3, 2, 2, 2, 2, True), ConvSpec(2, 2, 5, 1, 2)])
def test_backward_finite_differences(spec):
    rng = Rng(4)
    x = rng.normal(0, 1, (1, spec.in_channels, 7, 7))
    w = rng.normal(0, 1, spec.weight_shape)
    b = rng.normal(0, 1, (spec.out_channels,)) if spec.has_bias else None
    params = ConvParams(w, b)
    up = rng.normal(0, 1, ops.conv2d_forward(x, spec, params).shape)
    f = lambda: float((ops.conv2d_forward(x, spec, params) * up).sum())
    gx, gw, gb = ops.conv2d_backward(x, spec, params, up)
    assert close(gx, fd(f, x), 1e-6)
    assert close(gw, fd(f, w), 1e-6)
    if b is not None:
        assert close(gb, fd(f, b), 1e-6)


# -- elementwise, pooling ------------------------------------------------------

def test_activations():
    assert ops.relu(np.array([-3.0, 3.0])).tolist() == [0.0, 3.0]
    assert ops.sigmoid(np.array([0.0]))[0] == 0.5
    x = Rng(5).normal(0, 5, (1000,))
    assert np.max(np.abs(ops.sigmoid(x) + ops.sigmoid(-x) - 1)) < 1e-12
    big = ops.sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(big)) and big[0] == 0.0 and big[1] == 1.0
    with pytest.raises(ParameterError):
        ops.activation(x, "tanh")


def test_gap():
    assert ops.global_avg_pool(np.full((1, 1, 3, 3), 4.0))[0, 0, 0, 0] == 4.0
    assert ops.global_avg_pool(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))[0, 0, 0, 0] == 2.5
    x = Rng(6).normal(0, 1, (1, 1, 4, 4))
    perm = x.reshape(-1)[Rng(7).permutation(16)].reshape(1, 1, 4, 4)
    assert np.isclose(ops.global_avg_pool(x), ops.global_avg_pool(perm), atol=1e-15)
    with pytest.raises(ShapeError):
        ops.global_avg_pool(np.zeros((1, 1, 0, 3)))


def test_max_pool_picks_max():
    x = np.arange(16.0).reshape(1, 1, 4, 4)
    out, _ = ops.max_pool_forward(x, 2, 2)
    assert out[0, 0].tolist() == [[5.0, 7.0], [13.0, 15.0]]
    # padding never wins over real values
    out, _ = ops.max_pool_forward(-x - 1, 3, 2, 1)
    assert np.all(out < 0)


def test_avg_pool_counts_padding():
    out = ops.avg_pool_forward(np.ones((1, 1, 4, 4)), 3, 2, 1)
    assert out[0, 0, 0, 0] == pytest.approx(4 / 9)


# -- batch norm ----------------------------------------------------------------

def test_bn_train_normalizes_and_updates():
    x = Rng(8).normal(3, 2, (4, 3, 5, 5))
    stats = BNStats.fresh(3)
    y = ops.batchnorm_forward(x, np.ones(3), np.zeros(3), stats, "train")
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) < 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) < 1e-4)
    n = 100
    assert np.allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    assert np.allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * n / (n - 1))


def test_bn_eval_identity_stats():
    x = Rng(9).normal(0, 1, (2, 3, 4, 4))
    y = ops.batchnorm_forward(x, np.ones(3), np.zeros(3), BNStats.fresh(3), "eval")
    assert np.allclose(y, x, atol=1e-5)


def test_bn_single_element_channel():
    y = ops.batchnorm_forward(np.full((1, 2, 1, 1), 5.0), np.ones(2), np.zeros(2), BNStats.fresh(2), "train")
    assert np.all(np.isfinite(y)) and np.all(y == 0)


@pytest.mark.parametrize("mode", ["train", "eval"])
def test_bn_backward(mode):
    rng = Rng(10)
    x = rng.normal(0, 1, (3, 2, 3, 3))
    gamma, beta = rng.normal(1, 0.2, (2,)), rng.normal(0, 1, (2,))
    stats = BNStats(rng.normal(0, 1, (2,)), rng.uniform(0.5, 2, (2,)))
    up = rng.normal(0, 1, x.shape)

    def f():
        s = BNStats(stats.mean.copy(), stats.var.copy())
        return float((ops.batchnorm_forward(x, gamma, beta, s, mode) * up).sum())

    _, cache = ops.batchnorm_forward(x, gamma, beta, BNStats(stats.mean.copy(), stats.var.copy()), mode, True)
    gx, gg, gb = ops.batchnorm_backward(cache, up)
    assert close(gx, fd(f, x), 1e-5)
    assert close(gg, fd(f, gamma), 1e-5)
    assert close(gb, fd(f, beta), 1e-5)


# -- head ----------------------------------------------------------------------

def test_cross_entropy_uniform_and_saturated():
    loss, _ = ops.cross_entropy(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
    assert loss == pytest.approx(math.log(5), abs=1e-12)
    logits = np.array([[1000.0, 0.0], [0.0, 1000.0]])
    loss, g = ops.cross_entropy(logits, np.array([0, 1]))
    assert loss < 1e-12 and np.all(np.isfinite(g))


def test_cross_entropy_label_range():
    with pytest.raises(ParameterError):
        ops.cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


def test_linear_ce_gradients():
    rng = Rng(11)
    feat = rng.normal(0, 1, (4, 3, 1, 1))
    w, b = rng.normal(0, 1, (5, 3)), rng.normal(0, 1, (5,))
    labels = np.array([0, 4, 2, 2])
    f = lambda: ops.linear_and_cross_entropy(feat, w, b, labels)[0]
    _, g = ops.linear_and_cross_entropy(feat, w, b, labels)
    assert close(g["features"], fd(f, feat), 1e-6)
    assert close(g["weights"], fd(f, w), 1e-6)
    assert close(g["bias"], fd(f, b), 1e-6)
