import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from leakconv.conv import (ConvGeometry, ConvLayer, conv2d_backward, conv2d_forward, max_pool2x2,
                           max_pool2x2_backward)
from leakconv.tensor import ShapeError
from leakconv.windows import HAMMING_ALPHA, WindowSpec, apply_window, make_window

from oracles import central_diff, conv_direct, rel_err


def layer(w, b=None, stride=1, pad=0, window=None):
    kr, kc, _, m = w.shape
    win = None if window is None else make_window(WindowSpec(window, kr, kc))
    return ConvLayer(w, np.zeros(m) if b is None else b, ConvGeometry(kr, kc, stride, pad), win)


def test_identity_examples():
    x = np.random.default_rng(0).normal(size=(1, 4, 5))
    assert np.array_equal(conv2d_forward(x, layer(np.ones((1, 1, 1, 1)))), x)
    delta = np.zeros((3, 3, 1, 1))
    delta[1, 1] = 1.0
    assert np.array_equal(conv2d_forward(x, layer(delta, pad=1)), x)


def test_all_ones_example():
    y = conv2d_forward(np.ones((1, 2, 2)), layer(np.ones((3, 3, 1, 1)), pad=1))
    assert y.tolist() == [[[4.0, 4.0], [4.0, 4.0]]]
    np.testing.assert_array_equal(y, conv_direct(np.ones((1, 2, 2)), np.ones((3, 3, 1, 1)), np.zeros(1), 1, 1))


def test_geometry_errors():
    with pytest.raises(ShapeError):
        ConvGeometry(3, 3, 0, 0)
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((1, 2, 2)), layer(np.ones((3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((2, 5, 5)), layer(np.ones((3, 3, 1, 1))))
    with pytest.raises(ShapeError):
        ConvLayer(np.ones((3, 3, 1, 1)), np.zeros(1), ConvGeometry(3, 3), make_window(WindowSpec("hamming", 5)))
    lay = layer(np.ones((3, 3, 1, 2)))
    with pytest.raises(ShapeError):
        conv2d_backward(np.ones((1, 5, 5)), lay, np.ones((2, 4, 4)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 5), st.integers(1, 3), st.integers(0, 2),
       st.integers(5, 9), st.integers(0, 2**31))
def test_matches_direct_oracle(c, m, k, stride, pad, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, (c, size, size + 1))
    w = rng.uniform(-1, 1, (k, k, c, m))
    b = rng.uniform(-1, 1, m)
    got = conv2d_forward(x, layer(w, b, stride, pad))
    np.testing.assert_allclose(got, conv_direct(x, w, b, stride, pad), atol=1e-10, rtol=0)


def test_windowed_equals_premultiplied_bit_exact():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 3, 9, 9))
    w = rng.normal(size=(5, 5, 3, 4))
    windowed = layer(w, stride=2, pad=2, window="hamming")
    pre = layer(apply_window(w, windowed.window), stride=2, pad=2)
    assert np.array_equal(conv2d_forward(x, windowed), conv2d_forward(x, pre))


def test_batched_matches_per_sample():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(3, 2, 6, 6))
    lay = layer(rng.normal(size=(3, 3, 2, 2)), rng.normal(size=2), 1, 1)
    yb = conv2d_forward(x, lay)
    for i in range(3):
        np.testing.assert_allclose(yb[i], conv2d_forward(x[i], lay), atol=1e-14)


def test_linearity():
    rng = np.random.default_rng(5)
    x1, x2 = rng.normal(size=(2, 2, 7, 7))
    lay = layer(rng.normal(size=(3, 3, 2, 3)), pad=1)
    lhs = conv2d_forward(1.5 * x1 - 2.0 * x2, lay)
    rhs = 1.5 * conv2d_forward(x1, lay) - 2.0 * conv2d_forward(x2, lay)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_translation_covariance():
    rng = np.random.default_rng(6)
    k = 3
    x = np.zeros((1, 12, 12))
    x[:, 3:7, 3:7] = rng.normal(size=(1, 4, 4))
    lay = layer(rng.normal(size=(k, k, 1, 2)), pad=k - 1)
    y = conv2d_forward(x, lay)
    ys = conv2d_forward(np.roll(x, (2, 1), axis=(1, 2)), lay)
    np.testing.assert_allclose(ys[:, 2 + 2 : 12, 1 + 2 : 12], y[:, 2 : 12 - 2, 2 : 12 - 1], atol=1e-12)


@pytest.mark.parametrize("window", [None, "hamming"])
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 1)])
def test_backward_finite_differences(window, stride, pad):
    rng = np.random.default_rng(7)
    x = rng.uniform(-1, 1, (2, 5, 5))
    w = rng.uniform(-1, 1, (3, 3, 2, 3))
    b = rng.uniform(-1, 1, 3)
    lay = layer(w, b, stride, pad, window)
    dy = rng.uniform(-1, 1, conv2d_forward(x, lay).shape)

    def f():
        return float(np.sum(conv2d_forward(x, lay) * dy))

    dx, dw, db = conv2d_backward(x, lay, dy)
    assert rel_err(dx, central_diff(f, x)) < 1e-6
    assert rel_err(dw, central_diff(f, lay.weights)) < 1e-6
    assert rel_err(db, central_diff(f, lay.bias)) < 1e-6


def test_window_scales_weight_gradient():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(2, 6, 6))
    w = rng.normal(size=(3, 3, 2, 2))
    dy = rng.normal(size=(2, 6, 6))
    _, dw_rect, db_rect = conv2d_backward(x, layer(w, pad=1, window="rectangular"), dy)
    _, dk_none, _ = conv2d_backward(x, layer(w, pad=1), dy)
    assert np.array_equal(dw_rect, dk_none)
    # the effective kernel differs with a window, so compare against a rectangular run on the same K_eff
    ham = layer(w, pad=1, window="hamming")
    _, dw_ham, db_ham = conv2d_backward(x, ham, dy)
    _, dk_eff, _ = conv2d_backward(x, layer(ham.effective_kernel(), pad=1), dy)
    corner = (2 * HAMMING_ALPHA - 1) ** 2
    np.testing.assert_allclose(dw_ham[0, 0], dk_eff[0, 0] * corner, rtol=1e-14)
    np.testing.assert_allclose(dw_ham[1, 1], dk_eff[1, 1], rtol=1e-14)
    np.testing.assert_array_equal(db_ham, db_rect)


def test_need_flags():
    rng = np.random.default_rng(9)
    lay = layer(rng.normal(size=(3, 3, 1, 1)), pad=1)
    x, dy = rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 4, 4))
    dx, dw, db = conv2d_backward(x, lay, dy, need_dx=False)
    assert dx is None and dw is not None
    dx, dw, db = conv2d_backward(x, lay, dy, need_dw=False)
    assert dw is None and db is None and dx.shape == x.shape


def test_max_pool_examples():
    y, arg = max_pool2x2(np.array([[[1.0, 2.0], [3.0, 4.0]]]))
    assert y.tolist() == [[[4.0]]]
    dx = max_pool2x2_backward(np.ones((1, 1, 1)), arg)
    assert dx.tolist() == [[[0.0, 0.0], [0.0, 1.0]]]
    y, arg = max_pool2x2(np.full((1, 4, 4), 2.0))
    assert np.all(y == 2.0)
    dx = max_pool2x2_backward(np.ones((1, 2, 2)), arg)
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = 1.0
    assert np.array_equal(dx, expected)
    with pytest.raises(ShapeError):
        max_pool2x2(np.ones((1, 3, 4)))


def test_max_pool_finite_differences():
    rng = np.random.default_rng(10)
    x = rng.permutation(32).reshape(2, 4, 4) / 7.0  # distinct values, no ties
    dy = rng.normal(size=(2, 2, 2))
    _, arg = max_pool2x2(x)

    def f():
        return float(np.sum(max_pool2x2(x)[0] * dy))

    assert rel_err(max_pool2x2_backward(dy, arg), central_diff(f, x)) < 1e-6
