import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxelseg import tensor as T
from oracles import conv_naive, maxpool_naive


def test_constructors():
    assert T.zeros((2, 3)).shape == (2, 3)
    np.testing.assert_array_equal(T.full((2,), 1.5), [1.5, 1.5])
    a = T.from_values((2, 3), range(6))
    np.testing.assert_array_equal(a, [[0, 1, 2], [3, 4, 5]])


@pytest.mark.parametrize("shape", [(), (0, 2), (2, -1)])
def test_bad_shape(shape):
    with pytest.raises(T.ShapeError):
        T.zeros(shape)


def test_from_values_count_mismatch():
    with pytest.raises(T.ShapeError):
        T.from_values((2, 2), [1, 2, 3])


def test_matmul_checks_inner_dim():
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))
    np.testing.assert_allclose(T.matmul(np.eye(2), np.ones((2, 4))), np.ones((2, 4)))


def test_conv2d_hand_example():
    # a 3x3 input with a 2x2 all-ones kernel sums each 2x2 window
    x = np.arange(9, dtype=float).reshape(1, 3, 3)
    k = np.ones((1, 1, 2, 2))
    np.testing.assert_array_equal(T.conv2d_valid(x, k, np.array([1.0])),
                                  [[[9.0, 13.0], [21.0, 25.0]]])


def test_conv_is_correlation_not_convolution():
    x = np.zeros((1, 3, 3))
    x[0, 0, 0] = 1.0
    k = np.arange(4, dtype=float).reshape(1, 1, 2, 2)
    # the top-left output sees x[0,0] times k[0,0] only
    assert T.conv2d_valid(x, k)[0, 0, 0] == 0.0


def test_conv_kernel_too_large():
    with pytest.raises(T.ShapeError):
        T.conv2d_valid(np.ones((1, 3, 3)), np.ones((1, 1, 4, 2)))
    with pytest.raises(T.ShapeError):
        T.conv3d_valid(np.ones((2, 3, 3, 3)), np.ones((1, 1, 2, 2, 2)))


def test_conv_batched_matches_single():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 2, 6, 5))
    k = rng.normal(size=(3, 2, 3, 2))
    batched = T.conv2d_valid(x, k)
    for i in range(4):
        np.testing.assert_allclose(batched[i], T.conv2d_valid(x[i], k), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 7), st.integers(3, 7),
       st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_conv2d_matches_naive(c, k, h, w, kh, kw, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(c, h, w))
    ker = rng.normal(size=(k, c, kh, kw))
    b = rng.normal(size=k)
    np.testing.assert_allclose(T.conv2d_valid(x, ker, b), conv_naive(x, ker, b), atol=1e-10)


def test_conv3d_matches_naive():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 5, 4, 6))
    ker = rng.normal(size=(3, 2, 2, 3, 2))
    np.testing.assert_allclose(T.conv3d_valid(x, ker), conv_naive(x, ker), atol=1e-10)


def _fd_conv(fn, x, k, g, h=1e-6):
    """Finite-difference gradients of sum(g * fn(x, k)) in x and k."""
    def f(xx, kk):
        return float((g * fn(xx, kk)).sum())
    gx = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        gx[i] = (f(xp, k) - f(xm, k)) / (2 * h)
    gk = np.zeros_like(k)
    for i in np.ndindex(k.shape):
        kp, km = k.copy(), k.copy()
        kp[i] += h
        km[i] -= h
        gk[i] = (f(x, kp) - f(x, km)) / (2 * h)
    return gx, gk


@pytest.mark.parametrize("rank", [2, 3])
def test_conv_backward_matches_finite_differences(rank):
    rng = np.random.default_rng(rank)
    if rank == 2:
        x, k = rng.normal(size=(2, 5, 4)), rng.normal(size=(2, 2, 3, 2))
        fwd, bwd = T.conv2d_valid, T.conv2d_valid_backward
    else:
        x, k = rng.normal(size=(1, 4, 3, 4)), rng.normal(size=(2, 1, 2, 2, 3))
        fwd, bwd = T.conv3d_valid, T.conv3d_valid_backward
    g = rng.normal(size=fwd(x, k).shape)
    gk, gb, gx = bwd(x, k, g)
    ngx, ngk = _fd_conv(fwd, x, k, g)
    np.testing.assert_allclose(gx, ngx, atol=1e-7)
    np.testing.assert_allclose(gk, ngk, atol=1e-7)
    np.testing.assert_allclose(gb, g.reshape(g.shape[0], -1).sum(axis=1))


def test_conv_backward_skips_input_grad():
    x, k = np.ones((1, 4, 4)), np.ones((1, 1, 2, 2))
    _, _, gx = T.conv2d_valid_backward(x, k, np.ones((1, 3, 3)), need_input_grad=False)
    assert gx is None


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
       st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_maxpool_matches_naive(c, nh, nw, ph, pw, seed):
    rng = np.random.default_rng(seed)
    # small integer values force ties
    x = rng.integers(0, 3, size=(c, nh * ph, nw * pw)).astype(float)
    out, idx = T.maxpool2d(x, ph, pw)
    ref, ridx = maxpool_naive(x, ph, pw)
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_array_equal(idx, ridx)


def test_maxpool_tie_goes_to_first():
    x = np.ones((1, 2, 2))
    _, idx = T.maxpool2d(x, 2, 2)
    np.testing.assert_array_equal(idx[0, 0, 0], [0, 0])


def test_maxpool_indivisible():
    with pytest.raises(T.ShapeError):
        T.maxpool2d(np.ones((1, 5, 4)), 2, 2)


def test_maxpool_backward_routes_to_argmax():
    x = np.array([[[1.0, 5.0], [3.0, 2.0]]])
    _, idx = T.maxpool2d(x, 2, 2)
    gx = T.maxpool2d_backward(np.array([[[7.0]]]), idx, x.shape)
    np.testing.assert_array_equal(gx, [[[0.0, 7.0], [0.0, 0.0]]])
