"""Differentiable kernels built on :mod:`nucseg.tensor`.

Every function takes tensors (or array-likes) and returns a tensor whose
backward closure is exact; the gradient suite checks each one against
central differences.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .tensor import DimensionError, Tensor, _make, as_tensor

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def softmax(x, axis: int = -1) -> Tensor:
    """Shift-stable softmax along ``axis``."""
    x = as_tensor(x)
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - np.sum(g * s, axis=axis, keepdims=True)),)

    return _make(s, (x,), backward)


def layer_norm(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale and shift."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    n = x.shape[-1]
    if gain.shape[-1] != n or bias.shape[-1] != n:
        raise DimensionError("layer_norm gain/bias must match the normalized axis")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def backward(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        red = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=red).reshape(gain.shape)
        gbias = g.sum(axis=red).reshape(bias.shape)
        return gx, ggain, gbias

    return _make(out, (x, gain, bias), backward)


def layer_norm_channels(x, gain, bias, eps: float = 1e-6) -> Tensor:
    """LayerNorm over the channel axis of a C×H×W map."""
    from .tensor import transpose

    moved = transpose(as_tensor(x), (1, 2, 0))
    return transpose(layer_norm(moved, gain, bias, eps), (2, 0, 1))


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
    return _make(x.data * cdf, (x,), lambda g: (g * (cdf + x.data * pdf),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so exp never overflows
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ez = np.exp(d[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    out = as_tensor(x) @ weight
    return out if bias is None else out + bias


def _correlate(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    k = w.shape[-1]
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    # win: C×H'×W'×k×k ; w: C'×C×k×k
    return np.einsum("chwij,ocij->ohw", win, w, optimize=True)


def _scatter(g: np.ndarray, w: np.ndarray, stride: int, out_hw: tuple[int, int]) -> np.ndarray:
    """Adjoint of :func:`_correlate` with respect to its input."""
    c_out, c_in, k, _ = w.shape
    h_out, w_out = g.shape[1:]
    full = np.zeros((c_in,) + out_hw, dtype=g.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.einsum("ohw,oc->chw", g, w[:, :, i, j], optimize=True)
            full[:, i : i + stride * (h_out - 1) + 1 : stride,
                 j : j + stride * (w_out - 1) + 1 : stride] += contrib
    return full


def _kernel_grad(x: np.ndarray, g: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    h_out, w_out = g.shape[1:]
    win = win[:, :h_out, :w_out]
    return np.einsum("chwij,ohw->ocij", win, g, optimize=True)


def conv2d(x, kernel, stride: int = 1, bias=None) -> Tensor:
    """Valid (unpadded) cross-correlation of a C×H×W map with a C'×C×k×k kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[1] != x.shape[0]:
        raise DimensionError(f"conv2d shape mismatch: {x.shape} * {kernel.shape}")
    k = kernel.shape[-1]
    if k > x.shape[1] or k > x.shape[2]:
        raise DimensionError("conv2d kernel larger than input")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    out = _correlate(x.data, kernel.data, stride)

    def backward(g):
        gx = _scatter(g, kernel.data, stride, x.shape[1:])
        gk = _kernel_grad(x.data, g, k, stride)
        return gx, gk

    res = _make(out, (x, kernel), backward)
    if bias is not None:
        res = res + as_tensor(bias).reshape(-1, 1, 1)
    return res


def transpose_conv2d(x, kernel, stride: int = 1, bias=None) -> Tensor:
    """Adjoint of :func:`conv2d`.

    ``kernel`` has the same C'×C×k×k layout as the kernel of the forward
    convolution, so here it maps C' input channels to C output channels and
    the output side is ``(n - 1) * stride + k``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 4 or kernel.shape[0] != x.shape[0]:
        raise DimensionError(f"transpose_conv2d shape mismatch: {x.shape} * {kernel.shape}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    k = kernel.shape[-1]
    out_hw = ((x.shape[1] - 1) * stride + k, (x.shape[2] - 1) * stride + k)
    out = _scatter(x.data, kernel.data, stride, out_hw)

    def backward(g):
        gx = _correlate(g, kernel.data, stride)
        # input/output roles swap relative to conv2d; layout already C'×C×k×k
        gk = _kernel_grad(g, x.data, k, stride)
        return gx, gk

    res = _make(out, (x, kernel), backward)
    if bias is not None:
        res = res + as_tensor(bias).reshape(-1, 1, 1)
    return res


def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Row-stochastic n_out×n_in matrix for 1-D linear resampling (half-pixel centers)."""
    m = np.zeros((n_out, n_in))
    scale = n_in / n_out
    for o in range(n_out):
        src = min(max((o + 0.5) * scale - 0.5, 0.0), n_in - 1)
        i0 = int(math.floor(src))
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    return m


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize of a C×h×w map, align_corners=False convention."""
    x = as_tensor(x)
    if out_h < 1 or out_w < 1:
        raise DimensionError("output size must be positive")
    rh = interpolation_matrix(x.shape[1], out_h)
    rw = interpolation_matrix(x.shape[2], out_w)
    out = np.einsum("ph,chw,qw->cpq", rh, x.data, rw, optimize=True)
    return _make(
        out, (x,), lambda g: (np.einsum("ph,cpq,qw->chw", rh, g, rw, optimize=True),)
    )
