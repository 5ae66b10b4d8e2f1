import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrkd import ops
from rrkd.errors import ShapeError
from rrkd.gradcheck import op_checks
from rrkd.tensor import Tensor


def direct_conv(x, w, stride, pad):
    """Sliding-window oracle written with explicit loops."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for f in range(o):
            for i in range(ho):
                for j in range(wo):
                    patch = xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[b, f, i, j] = np.sum(patch * w[f])
    return out


def test_conv_identity_kernel():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), 1, 0)
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_zero_kernel(rng):
    out = ops.conv2d(Tensor(rng.standard_normal((2, 3, 5, 5))), Tensor(np.zeros((4, 3, 3, 3))), 1, 1)
    assert not out.data.any()


def test_conv_ones_counts_window_overlap():
    out = ops.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), 1, 1).data[0, 0]
    np.testing.assert_array_equal(out, [[4, 6, 4], [6, 9, 6], [4, 6, 4]])


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 2), c=st.integers(1, 3), o=st.integers(1, 3), h=st.integers(3, 7),
       k=st.sampled_from([1, 3]), stride=st.integers(1, 2), pad=st.integers(0, 1), seed=st.integers(0, 999))
def test_conv_matches_direct_loops(n, c, o, h, k, stride, pad, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((n, c, h, h)), rng.standard_normal((o, c, k, k))
    np.testing.assert_allclose(ops.conv2d(Tensor(x), Tensor(w), stride, pad).data,
                               direct_conv(x, w, stride, pad), rtol=1e-12, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_conv_linearity(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 3, 6, 6)), rng.standard_normal((2, 3, 6, 6))
    w = Tensor(rng.standard_normal((4, 3, 3, 3)))
    lhs = ops.conv2d(Tensor(a + b), w, 1, 1).data
    rhs = ops.conv2d(Tensor(a), w, 1, 1).data + ops.conv2d(Tensor(b), w, 1, 1).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-6 * np.max(np.abs(rhs))


def test_conv_shape_errors_name_both_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2, 4, 4\).*\(3, 5, 3, 3\)"):
        ops.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((3, 5, 3, 3))))
    with pytest.raises(ShapeError):
        ops.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))), 1, 0)


def test_batchnorm_constant_input_gives_beta():
    x = Tensor(np.full((2, 3, 4, 4), 7.0))
    beta = Tensor(np.array([0.5, -1.0, 2.0]))
    out = ops.batchnorm(x, Tensor(np.ones(3)), beta, ops.BNStats(3, np.float64), train=True)
    np.testing.assert_allclose(out.data, np.broadcast_to(beta.data[None, :, None, None], x.shape))


def test_batchnorm_identity_on_standardized_batch(rng):
    x = rng.standard_normal((4, 2, 5, 5))
    x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
    out = ops.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), ops.BNStats(2, np.float64), True)
    # unit batch variance, so the only change is the eps in the denominator
    np.testing.assert_allclose(out.data, x / np.sqrt(1 + 1e-5), rtol=1e-12, atol=1e-12)


def test_batchnorm_output_statistics(rng):
    x = rng.standard_normal((2, 3, 4, 4)) * 3 + 1
    gamma, beta = np.array([0.5, -2.0, 1.5]), np.array([0.1, 0.2, -0.3])
    out = ops.batchnorm(Tensor(x), Tensor(gamma), Tensor(beta), ops.BNStats(3, np.float64), True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-4)
    np.testing.assert_allclose(out.std(axis=(0, 2, 3)), np.abs(gamma), atol=1e-4)


def test_batchnorm_running_stats_and_eval(rng):
    x = rng.standard_normal((8, 2, 3, 3)) + 5
    stats = ops.BNStats(2, np.float64)
    ops.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, True)
    m = x.shape[0] * 9
    np.testing.assert_allclose(stats.mean, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(stats.var, 0.9 + 0.1 * x.var(axis=(0, 2, 3)) * m / (m - 1))
    out = ops.batchnorm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), stats, False).data
    expect = (x - stats.mean[None, :, None, None]) / np.sqrt(stats.var[None, :, None, None] + ops.BN_EPS)
    np.testing.assert_allclose(out, expect)


def test_batchnorm_eval_without_stats_raises():
    stats = ops.BNStats(1, np.float64, initialized=False)
    with pytest.raises(ValueError):
        ops.batchnorm(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.ones(1)), Tensor(np.zeros(1)), stats, False)


def test_small_op_values():
    np.testing.assert_array_equal(ops.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    sq = ops.sum_channels(ops.square(Tensor(np.array([3.0, 4.0]).reshape(1, 2, 1, 1))))
    np.testing.assert_array_equal(sq.data.ravel(), [25.0])
    np.testing.assert_allclose(ops.l2_normalize(Tensor(np.array([[3.0, 4.0]]))).data, [[0.6, 0.8]])
    np.testing.assert_array_equal(ops.l2_normalize(Tensor(np.zeros((1, 3)))).data, [[0, 0, 0]])
    pooled = ops.global_avg_pool(Tensor(np.arange(8.0).reshape(1, 2, 2, 2))).data
    np.testing.assert_array_equal(pooled, [[1.5, 5.5]])


def test_binary_ops_reject_shape_mismatch():
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.zeros(3)), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        ops.linear(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))), Tensor(np.zeros(2)))


def test_softmax_cross_entropy_values():
    uniform = ops.softmax_cross_entropy(Tensor(np.zeros((3, 10))), [0, 4, 9])
    assert float(uniform.data) == pytest.approx(math.log(10), abs=1e-12)
    logits = np.zeros((1, 10))
    logits[0, 3] = 1000
    assert float(ops.softmax_cross_entropy(Tensor(logits), [3]).data) == pytest.approx(0, abs=1e-12)
    expected = -math.log(math.exp(3) / (math.exp(1) + math.exp(2) + math.exp(3)))
    value = float(ops.softmax_cross_entropy(Tensor(np.array([[1.0, 2.0, 3.0]])), [2]).data)
    assert value == pytest.approx(expected, abs=1e-12)
    assert value == pytest.approx(0.40761, abs=1e-5)


def test_softmax_cross_entropy_label_out_of_range():
    with pytest.raises(ValueError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


@pytest.mark.parametrize("result", op_checks(seed=7), ids=lambda r: r.name)
def test_op_gradients_match_finite_differences(result):
    assert result.max_rel_err < 1e-4, result
