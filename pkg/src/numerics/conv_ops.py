# src/numerics/conv_ops.py
"""Convolution and pooling over (channel, frequency, time) grids."""

from __future__ import annotations

import logging
from typing import Any, Optional, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core_defs import ConfigurationError, DimensionError, Function, Tensor, as_tensor
from . import tensor_ops as ops

logger = logging.getLogger(__name__)

Pair = Union[int, Tuple[int, int]]


def _pair(value: Pair) -> Tuple[int, int]:
    if isinstance(value, int):
        return value, value
    a, b = value
    return int(a), int(b)


def conv_output_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class _Conv2d(Function):
    """Cross-correlation, im2col style."""

    def forward(self, x, w, stride: Tuple[int, int], padding: Tuple[int, int]):
        if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
            raise DimensionError(f"conv2d expects x[C_in,F,T] and w[C_out,C_in,kF,kT], got {x.shape} and {w.shape}")
        pf, pt = padding
        sf, st = stride
        kf, kt = w.shape[2], w.shape[3]
        xp = np.pad(x, ((0, 0), (pf, pf), (pt, pt)))
        if kf > xp.shape[1] or kt > xp.shape[2]:
            raise DimensionError(f"conv2d kernel {(kf, kt)} larger than padded input {xp.shape[1:]}")
        cols = sliding_window_view(xp, (kf, kt), axis=(1, 2))[:, ::sf, ::st]
        self.xshape, self.pshape = x.shape, xp.shape
        self.cols, self.w = cols, w
        self.stride, self.padding = stride, padding
        out = np.einsum("cftij,ocij->oft", cols.astype(np.float64), w.astype(np.float64), optimize=True)
        return out.astype(np.result_type(x, w))

    def backward(self, grad):
        g = grad.astype(np.float64)
        w64 = self.w.astype(np.float64)
        gw = np.einsum("oft,cftij->ocij", g, self.cols.astype(np.float64), optimize=True)
        sf, st = self.stride
        n_f, n_t = g.shape[1], g.shape[2]
        gxp = np.zeros(self.pshape, dtype=np.float64)
        for i in range(w64.shape[2]):
            for j in range(w64.shape[3]):
                gxp[:, i : i + sf * n_f : sf, j : j + st * n_t : st] += np.einsum("oft,oc->cft", g, w64[:, :, i, j])
        pf, pt = self.padding
        gx = gxp[:, pf : pf + self.xshape[1], pt : pt + self.xshape[2]]
        return gx.astype(grad.dtype), gw.astype(self.w.dtype)


def conv2d(
    x: Any,
    kernels: Any,
    bias: Optional[Any] = None,
    stride: Pair = 1,
    padding: Pair = 0,
) -> Tensor:
    stride, padding = _pair(stride), _pair(padding)
    if min(stride) < 1 or min(padding) < 0:
        raise ConfigurationError(f"conv2d stride {stride} / padding {padding} invalid")
    out = _Conv2d.apply(x, kernels, stride=stride, padding=padding)
    if bias is not None:
        out = out + ops.reshape(bias, (-1, 1, 1))
    return out


class _DepthwiseConv1d(Function):
    def forward(self, x, w):
        if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
            raise DimensionError(f"depthwise_conv1d expects x[T,D] and w[K,D], got {x.shape} and {w.shape}")
        k = w.shape[0]
        half = k // 2
        xp = np.pad(x, ((half, half), (0, 0)))
        self.xp, self.w, self.t = xp, w, x.shape[0]
        windows = sliding_window_view(xp, k, axis=0)  # (T, D, K)
        out = np.einsum("tdk,kd->td", windows.astype(np.float64), w.astype(np.float64))
        return out.astype(np.result_type(x, w))

    def backward(self, grad):
        g = grad.astype(np.float64)
        k = self.w.shape[0]
        windows = sliding_window_view(self.xp, k, axis=0).astype(np.float64)
        gw = np.einsum("td,tdk->kd", g, windows)
        gxp = np.zeros(self.xp.shape, dtype=np.float64)
        w64 = self.w.astype(np.float64)
        for offset in range(k):
            gxp[offset : offset + self.t] += g * w64[offset]
        half = k // 2
        return gxp[half : half + self.t].astype(grad.dtype), gw.astype(self.w.dtype)


def depthwise_conv1d(x: Any, kernels: Any, bias: Optional[Any] = None) -> Tensor:
    """Per-channel 'same' convolution along time. ``kernels`` is [K, D] with K odd."""
    k = as_tensor(kernels).shape[0]
    if k % 2 == 0:
        raise ConfigurationError(f"depthwise kernel size must be odd, got {k}")
    out = _DepthwiseConv1d.apply(x, kernels)
    if bias is not None:
        out = out + bias
    return out


def avg_pool2d(x: Any, pool: Pair) -> Tensor:
    """Non-overlapping mean pooling of a [C, F, T] grid; trailing remainders are dropped."""
    pf, pt = _pair(pool)
    x = as_tensor(x)
    c, f, t = x.shape
    if pf < 1 or pt < 1 or f < pf or t < pt:
        raise DimensionError(f"avg_pool2d pool {(pf, pt)} does not fit input {x.shape}")
    f_out, t_out = f // pf, t // pt
    if (f_out * pf, t_out * pt) != (f, t):
        x = x[:, : f_out * pf, : t_out * pt]
    grid = ops.reshape(x, (c, f_out, pf, t_out, pt))
    return ops.mean(grid, axis=(2, 4))
