import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference, naive_conv2d, rel_error, scatter_deconv2d
from quantseg import tensor as T
from quantseg.rng import Rng

FD_TOL = 1e-6


def test_conv_all_ones():
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 6))
    out = T.conv2d(x, np.ones((1, 1, 1, 1)), np.zeros(1))
    np.testing.assert_array_equal(out, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_matches_loops(stride, pad):
    g = np.random.default_rng(stride * 10 + pad)
    x, k, b = g.normal(size=(1, 2, 5, 5)), g.normal(size=(3, 2, 3, 3)), g.normal(size=3)
    np.testing.assert_allclose(T.conv2d(x, k, b, stride, pad), naive_conv2d(x, k, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv_shape_errors_name_dimension():
    with pytest.raises(ValueError, match="channel"):
        T.conv2d(np.ones((1, 2, 4, 4)), np.ones((1, 3, 3, 3)))
    with pytest.raises(ValueError, match="height"):
        T.conv2d(np.ones((1, 1, 2, 4)), np.ones((1, 1, 3, 3)))
    with pytest.raises(ValueError, match="stride"):
        T.conv2d(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)), stride=3)


def test_conv_backward_zero_and_identity():
    g = np.random.default_rng(1)
    x, k = g.normal(size=(1, 2, 5, 5)), g.normal(size=(3, 2, 3, 3))
    gx, gk, gb = T.conv2d_backward(np.zeros((1, 3, 3, 3)), x, k)
    assert not gx.any() and not gk.any() and not gb.any()
    go = g.normal(size=(1, 1, 5, 5))
    gx, _, _ = T.conv2d_backward(go, g.normal(size=(1, 1, 5, 5)), np.ones((1, 1, 1, 1)))
    np.testing.assert_array_equal(gx, go)


def test_deconv_identity_and_scatter():
    x = np.random.default_rng(2).normal(size=(1, 1, 4, 4))
    np.testing.assert_array_equal(T.deconv2d(x, np.ones((1, 1, 1, 1))), x)
    out = T.deconv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), stride=2)
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_array_equal(out, scatter_deconv2d(np.ones((1, 1, 2, 2)), np.ones((1, 1, 2, 2)), 2, 0))
    np.testing.assert_array_equal(out, np.ones((1, 1, 4, 4)))


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 4), (2, 0, 3), (1, 1, 3)])
def test_deconv_matches_scatter(stride, pad, k):
    g = np.random.default_rng(stride + pad + k)
    x, w = g.normal(size=(2, 3, 4, 3)), g.normal(size=(3, 2, k, k))
    np.testing.assert_allclose(T.deconv2d(x, w, stride=stride, zero_pad=pad), scatter_deconv2d(x, w, stride, pad),
                               rtol=1e-12, atol=1e-12)


def test_adjoint_identity():
    g = np.random.default_rng(3)
    for stride, pad in [(1, 0), (1, 1), (2, 0), (2, 1)]:
        # 9x9 keeps (H + 2p - k) divisible by the stride so shapes round-trip
        x, k = g.normal(size=(2, 3, 9, 9)), g.normal(size=(4, 3, 3, 3))
        y = g.normal(size=T.conv2d(x, k, None, stride, pad).shape)
        lhs = np.vdot(T.conv2d(x, k, None, stride, pad), y)
        rhs = np.vdot(x, T.deconv2d(y, k, None, stride, pad))
        assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def _conv_instance(rng, deconv):
    stride, pad = 1 + rng.integers(2), rng.integers(2)
    x = np.array(rng.normal(size=(1, 2, 5, 5)))
    k = np.array(rng.normal(size=(2, 3, 3, 3) if deconv else (3, 2, 3, 3)))
    b = np.array(rng.normal(size=3))
    return x, k, b, int(stride), int(pad)


def fd_conv_errors(n_instances=50, deconv=False, seed=0):
    """Worst relative error of (x, kernel, bias) gradients over random instances."""
    rng = Rng(seed)
    fwd = T.deconv2d if deconv else T.conv2d
    bwd = T.deconv2d_backward if deconv else T.conv2d_backward
    worst = 0.0
    for _ in range(n_instances):
        x, k, b, s, p = _conv_instance(rng, deconv)
        w = np.array(rng.normal(size=fwd(x, k, b, s, p).shape))

        def f():
            return float(np.sum(w * fwd(x, k, b, s, p)))

        gx, gk, gb = bwd(w, x, k, s, p)
        for a, arr in ((gx, x), (gk, k), (gb, b)):
            worst = max(worst, rel_error(a, central_difference(f, arr)))
    return worst


def fd_pointwise_errors(n_instances=50, seed=0):
    """relu, sigmoid and bce over random instances."""
    rng = Rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        x = np.array(rng.normal(size=(1, 2, 4, 4)))
        # keep relu inputs away from the kink so the difference quotient is valid
        x[np.abs(x) < 1e-3] = 0.5
        w = np.array(rng.normal(size=x.shape))
        worst = max(worst, rel_error(T.relu_backward(w, x), central_difference(lambda: float(np.sum(w * T.relu(x))), x)))
        y = T.sigmoid(x)
        worst = max(worst, rel_error(T.sigmoid_backward(w, y),
                                     central_difference(lambda: float(np.sum(w * T.sigmoid(x))), x)))
        pred = np.array(rng.uniform(0.05, 0.95, size=x.shape))
        target = (np.array(rng.uniform(0.0, 1.0, size=x.shape)) > 0.5).astype(float)
        _, g = T.bce_loss(pred, target)
        worst = max(worst, rel_error(g, central_difference(lambda: T.bce_loss(pred, target)[0], pred)))
    return worst


def test_conv_gradients_fd():
    assert fd_conv_errors(20, deconv=False, seed=1) < FD_TOL


def test_deconv_gradients_fd():
    assert fd_conv_errors(20, deconv=True, seed=2) < FD_TOL


def test_pointwise_gradients_fd():
    assert fd_pointwise_errors(20, seed=3) < FD_TOL


def test_bce_examples():
    loss, _ = T.bce_loss(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert loss <= 1e-6
    loss, _ = T.bce_loss(np.full((1, 1, 3, 3), 0.5), np.zeros((1, 1, 3, 3)))
    assert loss == pytest.approx(np.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        T.bce_loss(np.ones((1, 1, 2, 2)), np.ones((1, 1, 3, 3)))


def test_sigmoid_extremes_are_finite():
    y = T.sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    np.testing.assert_array_equal(y, [0.0, 0.5, 1.0])


def test_sgd_examples():
    p, g = np.array([1.0]), np.array([0.5])
    assert T.sgd_step(p, g, 0.1)[0] == pytest.approx(0.95)
    np.testing.assert_array_equal(T.sgd_step(p, g, 0.0), p)
    np.testing.assert_array_equal(T.sgd_step(p, g, 0.1, np.array([True])), p)
    with pytest.raises(ValueError, match="non-negative"):
        T.sgd_step(p, g, -0.1)


@settings(max_examples=40, deadline=None)
@given(h=st.integers(3, 9), w=st.integers(3, 9), k=st.sampled_from([1, 3]), stride=st.sampled_from([1, 2]),
       pad=st.integers(0, 1))
def test_conv_output_shape(h, w, k, stride, pad):
    x = np.zeros((1, 1, h, w))
    out = T.conv2d(x, np.zeros((2, 1, k, k)), None, stride, pad)
    assert out.shape == (1, 2, T.conv_output_size(h, k, stride, pad), T.conv_output_size(w, k, stride, pad))


@settings(max_examples=40, deadline=None)
@given(h=st.integers(1, 6), k=st.sampled_from([2, 3, 4]), stride=st.sampled_from([1, 2]))
def test_deconv_output_shape(h, k, stride):
    pad = (k - stride) // 2 if k >= stride else 0
    out = T.deconv2d(np.zeros((1, 1, h, h)), np.zeros((1, 1, k, k)), None, stride, pad)
    assert out.shape[2] == (h - 1) * stride - 2 * pad + k
