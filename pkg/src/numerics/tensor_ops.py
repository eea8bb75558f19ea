# src/numerics/tensor_ops.py
"""
Differentiable tensor operations.

Elementwise arithmetic broadcasts like numpy. Reductions that feed a
normalisation (matmul, softmax, layer norm, interpolation) accumulate in
float64 and cast back to the operand dtype.
"""

from __future__ import annotations

import logging
from typing import Any, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from .core_defs import (
    ConfigurationError,
    DegenerateRowError,
    DimensionError,
    Function,
    Tensor,
    as_tensor,
    unbroadcast,
)

logger = logging.getLogger(__name__)

Axis = Union[None, int, Tuple[int, ...]]


def _result_dtype(*arrays: np.ndarray) -> np.dtype:
    return np.result_type(*arrays)


# ---------------------------------------------------------------------------
#  Elementwise binary
# ---------------------------------------------------------------------------
class _Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(grad, self.shapes[1])


class _Sub(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return unbroadcast(grad, self.shapes[0]), unbroadcast(-grad, self.shapes[1])


class _Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return unbroadcast(grad * self.b, self.a.shape), unbroadcast(grad * self.a, self.b.shape)


class _Div(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, grad):
        ga = grad / self.b
        gb = -grad * self.a / (self.b * self.b)
        return unbroadcast(ga, self.a.shape), unbroadcast(gb, self.b.shape)


def add(a: Any, b: Any) -> Tensor:
    return _Add.apply(a, b)


def sub(a: Any, b: Any) -> Tensor:
    return _Sub.apply(a, b)


def mul(a: Any, b: Any) -> Tensor:
    return _Mul.apply(a, b)


def div(a: Any, b: Any) -> Tensor:
    return _Div.apply(a, b)


# ---------------------------------------------------------------------------
#  Elementwise unary
# ---------------------------------------------------------------------------
class _Neg(Function):
    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class _Pow(Function):
    def forward(self, x, exponent: float):
        self.x, self.exponent = x, float(exponent)
        return np.power(x, self.exponent)

    def backward(self, grad):
        if self.exponent == 0.0:
            return (np.zeros_like(self.x),)
        return (grad * self.exponent * np.power(self.x, self.exponent - 1.0),)


class _Exp(Function):
    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out,)


class _Log(Function):
    def forward(self, x):
        self.x = x
        return np.log(x)

    def backward(self, grad):
        return (grad / self.x,)


class _Sigmoid(Function):
    def forward(self, x):
        self.out = special.expit(x)
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class _Tanh(Function):
    def forward(self, x):
        self.out = np.tanh(x)
        return self.out

    def backward(self, grad):
        return (grad * (1.0 - self.out * self.out),)


class _Gelu(Function):
    # Exact form x * Phi(x).
    def forward(self, x):
        self.x = x
        self.cdf = special.ndtr(x).astype(x.dtype)
        return x * self.cdf

    def backward(self, grad):
        pdf = np.exp(-0.5 * self.x * self.x) / np.sqrt(2.0 * np.pi)
        return (grad * (self.cdf + self.x * pdf.astype(self.x.dtype)),)


class _Silu(Function):
    def forward(self, x):
        self.x = x
        self.sig = special.expit(x)
        return x * self.sig

    def backward(self, grad):
        return (grad * self.sig * (1.0 + self.x * (1.0 - self.sig)),)


class _Clip(Function):
    def forward(self, x, lo: Optional[float], hi: Optional[float]):
        self.keep = np.ones(x.shape, dtype=bool)
        if lo is not None:
            self.keep &= x >= lo
        if hi is not None:
            self.keep &= x <= hi
        return np.clip(x, lo, hi)

    def backward(self, grad):
        return (np.where(self.keep, grad, 0.0).astype(grad.dtype),)


def neg(x: Any) -> Tensor:
    return _Neg.apply(x)


def power(x: Any, exponent: float) -> Tensor:
    return _Pow.apply(x, exponent=exponent)


def exp(x: Any) -> Tensor:
    return _Exp.apply(x)


def log(x: Any) -> Tensor:
    return _Log.apply(x)


def sigmoid(x: Any) -> Tensor:
    return _Sigmoid.apply(x)


def tanh(x: Any) -> Tensor:
    return _Tanh.apply(x)


def gelu(x: Any) -> Tensor:
    return _Gelu.apply(x)


def silu(x: Any) -> Tensor:
    return _Silu.apply(x)


def clip(x: Any, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    return _Clip.apply(x, lo=lo, hi=hi)


# ---------------------------------------------------------------------------
#  Reductions
# ---------------------------------------------------------------------------
def _normalise_axis(axis: Axis, ndim: int) -> Tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


class _Sum(Function):
    def forward(self, x, axis: Axis, keepdims: bool):
        self.shape = x.shape
        self.axes = _normalise_axis(axis, x.ndim)
        self.keepdims = keepdims
        return np.sum(x, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, self.shape).copy(),)


class _Mean(Function):
    def forward(self, x, axis: Axis, keepdims: bool):
        self.shape = x.shape
        self.axes = _normalise_axis(axis, x.ndim)
        self.keepdims = keepdims
        self.count = int(np.prod([x.shape[a] for a in self.axes])) if self.axes else 1
        return np.mean(x, axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad / self.count, self.shape).copy(),)


class _Max(Function):
    # Gradient goes to the first maximal element along the reduced axis.
    def forward(self, x, axis: int, keepdims: bool):
        self.shape = x.shape
        self.axis = axis % x.ndim
        self.keepdims = keepdims
        self.arg = np.argmax(x, axis=self.axis)
        return np.max(x, axis=self.axis, keepdims=keepdims)

    def backward(self, grad):
        if self.keepdims:
            grad = np.squeeze(grad, axis=self.axis)
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.put_along_axis(out, np.expand_dims(self.arg, self.axis), np.expand_dims(grad, self.axis), axis=self.axis)
        return (out,)


def sum_(x: Any, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return _Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x: Any, axis: Axis = None, keepdims: bool = False) -> Tensor:
    return _Mean.apply(x, axis=axis, keepdims=keepdims)


def amax(x: Any, axis: int = -1, keepdims: bool = False) -> Tensor:
    return _Max.apply(x, axis=axis, keepdims=keepdims)


# ---------------------------------------------------------------------------
#  Shape manipulation
# ---------------------------------------------------------------------------
class _Reshape(Function):
    def forward(self, x, shape: Tuple[int, ...]):
        self.shape = x.shape
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class _Transpose(Function):
    def forward(self, x, axes: Optional[Tuple[int, ...]]):
        self.axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        return np.transpose(x, self.axes)

    def backward(self, grad):
        return (np.transpose(grad, np.argsort(self.axes)),)


class _Index(Function):
    def forward(self, x, index: Any):
        self.shape, self.index = x.shape, index
        return x[index]

    def backward(self, grad):
        out = np.zeros(self.shape, dtype=grad.dtype)
        np.add.at(out, self.index, grad)
        return (out,)


class _Concat(Function):
    def forward(self, *arrays, axis: int):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=self.axis))


def reshape(x: Any, shape: Sequence[int]) -> Tensor:
    return _Reshape.apply(x, shape=tuple(shape))


def transpose(x: Any, axes: Optional[Sequence[int]] = None) -> Tensor:
    return _Transpose.apply(x, axes=None if axes is None else tuple(axes))


def index(x: Any, idx: Any) -> Tensor:
    return _Index.apply(x, index=idx)


def concat(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    return _Concat.apply(*tensors, axis=axis)


# ---------------------------------------------------------------------------
#  Matrix product
# ---------------------------------------------------------------------------
class _MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        self.a, self.b = a, b
        dtype = _result_dtype(a, b)
        return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(dtype)

    def backward(self, grad):
        g = grad.astype(np.float64)
        ga = np.matmul(g, np.swapaxes(self.b, -1, -2).astype(np.float64))
        gb = np.matmul(np.swapaxes(self.a, -1, -2).astype(np.float64), g)
        return (
            unbroadcast(ga, self.a.shape).astype(self.a.dtype),
            unbroadcast(gb, self.b.shape).astype(self.b.dtype),
        )


def matmul(a: Any, b: Any) -> Tensor:
    """``a @ b`` over the last two axes; leading axes broadcast."""
    return _MatMul.apply(a, b)


# ---------------------------------------------------------------------------
#  Softmax
# ---------------------------------------------------------------------------
class _MaskedSoftmax(Function):
    def forward(self, logits, mask: Optional[np.ndarray], axis: int):
        self.axis = axis
        x = logits.astype(np.float64)
        if mask is not None:
            mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
            if np.any(np.all(mask, axis=axis)):
                raise DegenerateRowError(f"masked_softmax: a row of shape {logits.shape} is fully masked along axis {axis}")
            x = np.where(mask, -np.inf, x)
        x = x - np.max(x, axis=axis, keepdims=True)
        e = np.exp(x)
        out = e / np.sum(e, axis=axis, keepdims=True)
        self.out = out.astype(logits.dtype)
        return self.out

    def backward(self, grad):
        s = self.out.astype(np.float64)
        g = grad.astype(np.float64)
        gx = s * (g - np.sum(g * s, axis=self.axis, keepdims=True))
        return (gx.astype(grad.dtype),)


def masked_softmax(logits: Any, mask: Optional[np.ndarray] = None, axis: int = -1) -> Tensor:
    """
    Softmax along ``axis``. ``mask`` is boolean and broadcastable to the logits;
    True marks a hidden position, which receives weight exactly 0.
    """
    return _MaskedSoftmax.apply(logits, mask=mask, axis=axis)


# ---------------------------------------------------------------------------
#  Layer normalisation
# ---------------------------------------------------------------------------
class _Normalize(Function):
    def forward(self, x, eps: float):
        x64 = x.astype(np.float64)
        mu = x64.mean(axis=-1, keepdims=True)
        centred = x64 - mu
        var = np.mean(centred * centred, axis=-1, keepdims=True)
        self.inv = 1.0 / np.sqrt(var + eps)
        self.xhat = centred * self.inv
        return self.xhat.astype(x.dtype)

    def backward(self, grad):
        g = grad.astype(np.float64)
        gx = self.inv * (
            g - g.mean(axis=-1, keepdims=True) - self.xhat * np.mean(g * self.xhat, axis=-1, keepdims=True)
        )
        return (gx.astype(grad.dtype),)


def layer_norm(x: Any, gain: Any, bias: Any, eps: float = 1e-5) -> Tensor:
    x = as_tensor(x)
    gain, bias = as_tensor(gain), as_tensor(bias)
    if gain.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise DimensionError(
            f"layer_norm affine shapes gain={gain.shape} bias={bias.shape} do not match last axis of {x.shape}"
        )
    if eps <= 0:
        raise ConfigurationError(f"layer_norm eps must be positive, got {eps}")
    return _Normalize.apply(x, eps=eps) * gain + bias


# ---------------------------------------------------------------------------
#  Linear interpolation along time
# ---------------------------------------------------------------------------
def _interpolation_plan(t_in: int, t_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Endpoint-aligned source indices and fractions for each output row."""
    if t_in == 1 or t_out == 1:
        zeros = np.zeros(t_out, dtype=np.int64)
        return zeros, zeros, np.zeros(t_out, dtype=np.float64)
    numer = np.arange(t_out, dtype=np.int64) * (t_in - 1)
    lo = numer // (t_out - 1)
    frac = (numer % (t_out - 1)) / float(t_out - 1)
    hi = np.minimum(lo + 1, t_in - 1)
    return lo, hi, frac


class _LinearUpsample(Function):
    def forward(self, x, factor: int):
        t_in = x.shape[0]
        self.t_in = t_in
        self.lo, self.hi, self.frac = _interpolation_plan(t_in, t_in * factor)
        x64 = x.astype(np.float64)
        f = self.frac.reshape((-1,) + (1,) * (x.ndim - 1))
        out = x64[self.lo] + f * (x64[self.hi] - x64[self.lo])
        return out.astype(x.dtype)

    def backward(self, grad):
        g = grad.astype(np.float64)
        f = self.frac.reshape((-1,) + (1,) * (grad.ndim - 1))
        out = np.zeros((self.t_in,) + grad.shape[1:], dtype=np.float64)
        np.add.at(out, self.lo, g * (1.0 - f))
        np.add.at(out, self.hi, g * f)
        return (out.astype(grad.dtype),)


def linear_upsample(x: Any, factor: int) -> Tensor:
    """Per-channel linear interpolation along axis 0 to ``T * factor`` rows."""
    if int(factor) != factor or factor < 1:
        raise ConfigurationError(f"upsample factor must be a positive integer, got {factor}")
    x = as_tensor(x)
    if x.ndim < 1 or x.shape[0] < 1:
        raise DimensionError(f"linear_upsample needs at least one time step, got shape {x.shape}")
    return _LinearUpsample.apply(x, factor=int(factor))


def glu(x: Any, axis: int = -1) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half along ``axis``."""
    x = as_tensor(x)
    axis = axis % x.ndim
    width = x.shape[axis]
    if width % 2:
        raise DimensionError(f"glu needs an even extent along axis {axis}, got shape {x.shape}")
    half = width // 2
    lead = (slice(None),) * axis
    return x[lead + (slice(0, half),)] * sigmoid(x[lead + (slice(half, width),)])


def stack(tensors: Sequence[Any], axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        t = as_tensor(t)
        shape = list(t.shape)
        shape.insert(axis % (t.ndim + 1), 1)
        expanded.append(reshape(t, shape))
    return concat(expanded, axis=axis)


# ---------------------------------------------------------------------------
#  Operator overloads on Tensor
# ---------------------------------------------------------------------------
def _rsub(self, other):
    return sub(other, self)


def _rdiv(self, other):
    return div(other, self)


Tensor.__add__ = add
Tensor.__radd__ = lambda self, other: add(other, self)
Tensor.__sub__ = sub
Tensor.__rsub__ = _rsub
Tensor.__mul__ = mul
Tensor.__rmul__ = lambda self, other: mul(other, self)
Tensor.__truediv__ = div
Tensor.__rtruediv__ = _rdiv
Tensor.__neg__ = neg
Tensor.__pow__ = power
Tensor.__matmul__ = matmul
Tensor.__rmatmul__ = lambda self, other: matmul(other, self)
Tensor.__getitem__ = index
Tensor.sum = sum_
Tensor.mean = mean
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 and not isinstance(shape[0], int) else shape)
Tensor.transpose = transpose
Tensor.T = property(lambda self: transpose(self))
Tensor.exp = exp
Tensor.log = log
Tensor.sigmoid = sigmoid
