"""Dense array kernels: construction, matrix product, valid convolution and max-pooling.

Tensors are plain :class:`numpy.ndarray` objects in C (row-major) order. Every
kernel accepts either a single sample (``[C, ...]``) or a batch with a leading
sample axis (``[N, C, ...]``); the batched forms are what the network layers use.

Convolutions are cross-correlations (no kernel flip) over the "valid" region only.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array extents do not compose."""


def _check_shape(shape: Sequence[int]) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if not shape or any(s < 1 for s in shape):
        raise ShapeError(f"shape must be non-empty with extents >= 1, got {shape}")
    return shape


def zeros(shape: Sequence[int], dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.zeros(_check_shape(shape), dtype=dtype)


def full(shape: Sequence[int], value: float, dtype=DEFAULT_DTYPE) -> np.ndarray:
    return np.full(_check_shape(shape), value, dtype=dtype)


def from_values(shape: Sequence[int], values, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Build a tensor of ``shape`` from a flat sequence of row-major values."""
    shape = _check_shape(shape)
    flat = np.asarray(values, dtype=dtype).ravel()
    if flat.size != int(np.prod(shape)):
        raise ShapeError(f"{flat.size} values cannot fill shape {shape}")
    return flat.reshape(shape).copy()


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions differ: {a.shape} x {b.shape}")
    return a @ b


def _batched(x: np.ndarray, rank: int, name: str) -> tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"{name}: expected rank {rank} or {rank + 1} input, got shape {x.shape}")


def _im2col(x, ksp):
    """``[N, C, *sp]`` -> ``([N*P, C*prod(k)], out_spatial)`` with P output positions."""
    nsp = len(ksp)
    win = sliding_window_view(x, ksp, axis=tuple(range(2, 2 + nsp)))  # [N, C, *out, *k]
    osp = win.shape[2:2 + nsp]
    win = np.moveaxis(win, 1, 1 + nsp)  # [N, *out, C, *k]
    return win.reshape(x.shape[0] * int(np.prod(osp)), -1), osp


def _check_conv(x, kernels, bias, nsp):
    ksp = kernels.shape[2:]
    if len(ksp) != nsp:
        raise ShapeError(f"kernel rank {kernels.ndim} does not match {nsp}D convolution")
    if kernels.shape[1] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernels.shape[1]} input channels, input has {x.shape[1]}"
        )
    if any(k > s for k, s in zip(ksp, x.shape[2:])):
        raise ShapeError(f"kernel {ksp} larger than input {x.shape[2:]}")
    if bias is not None and bias.shape != (kernels.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({kernels.shape[0]},)")


def _conv_valid(x, kernels, bias, nsp, return_cols=False):
    # x: [N, C, *sp], kernels: [K, C, *k]
    _check_conv(x, kernels, bias, nsp)
    cols, osp = _im2col(x, kernels.shape[2:])
    out = cols @ kernels.reshape(kernels.shape[0], -1).T  # [N*P, K]
    if bias is not None:
        out += bias
    out = out.reshape((x.shape[0],) + osp + (kernels.shape[0],))
    out = np.ascontiguousarray(np.moveaxis(out, -1, 1))  # [N, K, *out]
    return (out, cols) if return_cols else out


def _conv_valid_backward(x, kernels, grad_out, nsp, need_input_grad=True, cols=None,
                         x_shape=None):
    """Gradients of a valid cross-correlation w.r.t. kernels, bias and input.

    ``cols`` may carry the im2col matrix saved by the forward pass, in which
    case ``x`` is only needed for its shape (or pass ``x_shape``).
    """
    ksp = kernels.shape[2:]
    spatial = tuple(range(2, 2 + nsp))
    if cols is None:
        cols, _ = _im2col(x, ksp)
    x_shape = x.shape if x_shape is None else x_shape
    n_k = kernels.shape[0]
    g2 = np.moveaxis(grad_out, 1, -1).reshape(-1, n_k)  # [N*P, K]
    gk = (g2.T @ cols).reshape(kernels.shape)
    gb = grad_out.sum(axis=(0,) + spatial)
    gx = None
    if need_input_grad:
        # col2im: one GEMM to patch space, then scatter-add each kernel offset
        osp = grad_out.shape[2:]
        n, c = x_shape[0], x_shape[1]
        pc = g2 @ kernels.reshape(n_k, -1)  # [N*P, C*prod(k)]
        pc = pc.reshape((n,) + osp + (c,) + ksp)
        pc = np.moveaxis(pc, (1 + nsp,) + tuple(range(2 + nsp, 2 + 2 * nsp)),
                         tuple(range(0, 1 + nsp)))
        pc = np.ascontiguousarray(pc)  # [C, *k, N, *out]
        gxt = np.zeros((c, n) + tuple(x_shape[2:]), dtype=pc.dtype)
        for off in np.ndindex(*ksp):
            dst = (slice(None), slice(None)) + tuple(slice(o, o + m) for o, m in zip(off, osp))
            gxt[dst] += pc[(slice(None),) + off]
        gx = np.ascontiguousarray(np.moveaxis(gxt, 0, 1))
    return gk, gb, gx


def conv2d_valid(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid 2D cross-correlation.

    Parameters
    ----------
    x : ndarray, shape (C, H, W) or (N, C, H, W)
    kernels : ndarray, shape (K, C, kh, kw)
    bias : ndarray, shape (K,), optional

    Returns
    -------
    ndarray, shape (K, H-kh+1, W-kw+1), with a leading N axis for batched input.
    """
    xb, single = _batched(x, 3, "conv2d_valid")
    out = _conv_valid(xb, kernels, bias, 2)
    return out[0] if single else out


def conv3d_valid(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid 3D cross-correlation; ``x`` is (C, D, H, W) or (N, C, D, H, W)."""
    xb, single = _batched(x, 4, "conv3d_valid")
    out = _conv_valid(xb, kernels, bias, 3)
    return out[0] if single else out


def conv2d_valid_backward(x, kernels, grad_out, need_input_grad=True):
    xb, single = _batched(x, 3, "conv2d_valid_backward")
    gb_out = grad_out[None] if single else grad_out
    gk, gb, gx = _conv_valid_backward(xb, kernels, gb_out, 2, need_input_grad)
    if single and gx is not None:
        gx = gx[0]
    return gk, gb, gx


def conv3d_valid_backward(x, kernels, grad_out, need_input_grad=True):
    xb, single = _batched(x, 4, "conv3d_valid_backward")
    gb_out = grad_out[None] if single else grad_out
    gk, gb, gx = _conv_valid_backward(xb, kernels, gb_out, 3, need_input_grad)
    if single and gx is not None:
        gx = gx[0]
    return gk, gb, gx


def _maxpool_windows(x, ph, pw):
    n, c, h, w = x.shape
    if h % ph or w % pw:
        raise ShapeError(f"pool {ph}x{pw} does not divide input {h}x{w}")
    win = x.reshape(n, c, h // ph, ph, w // pw, pw).transpose(0, 1, 2, 4, 3, 5)
    return win.reshape(n, c, h // ph, w // pw, ph * pw)


def maxpool2d(x: np.ndarray, ph: int, pw: int) -> tuple[np.ndarray, np.ndarray]:
    """Non-overlapping max-pool.

    Returns the pooled maps and, for every output cell, the absolute ``(row, col)``
    of the input element that won. Ties go to the first element in row-major
    window order.
    """
    xb, single = _batched(x, 3, "maxpool2d")
    win = _maxpool_windows(xb, ph, pw)
    local = win.argmax(axis=-1)
    out = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
    rows = np.arange(out.shape[2])[:, None] * ph + local // pw
    cols = np.arange(out.shape[3])[None, :] * pw + local % pw
    idx = np.stack([rows, cols], axis=-1)
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2d_backward(grad_out: np.ndarray, argmax: np.ndarray, input_shape) -> np.ndarray:
    """Route pooled gradients back to the stored argmax positions."""
    single = grad_out.ndim == 3
    g = grad_out[None] if single else grad_out
    a = argmax[None] if single else argmax
    shape = tuple(input_shape)
    if single:
        shape = (1,) + shape
    gx = np.zeros(shape, dtype=g.dtype)
    n, c = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    n = np.broadcast_to(n[:, :, None, None], g.shape)
    c = np.broadcast_to(c[:, :, None, None], g.shape)
    np.add.at(gx, (n, c, a[..., 0], a[..., 1]), g)
    return gx[0] if single else gx
