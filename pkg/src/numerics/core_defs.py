# src/numerics/core_defs.py
"""
Core definitions for the tensor kernel.

• ``Tensor``      – dense row-major array plus the reverse-mode graph node.
• ``Parameter``   – trainable leaf tensor with a zero-initialised gradient.
• ``Function``    – base class of every differentiable operation.
• Error classes shared by all numerics modules.

The kernel evaluates in 32-bit floats by default. ``default_dtype`` switches the
dtype used for newly created constants (the gradient checker runs in float64).
"""

from __future__ import annotations

import contextlib
import logging
from typing import Any, Iterator, Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
#  Errors
# ---------------------------------------------------------------------------
class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(ValueError):
    """An operation was configured with values it cannot honour."""


class DegenerateRowError(ValueError):
    """A softmax row has every position masked."""


class EvaluationError(RuntimeError):
    """A function under evaluation produced a non-finite value."""


# ---------------------------------------------------------------------------
#  Global evaluation state
# ---------------------------------------------------------------------------
_GRAD_ENABLED: bool = True
_DEFAULT_DTYPE: np.dtype = np.dtype(np.float32)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def get_default_dtype() -> np.dtype:
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


@contextlib.contextmanager
def default_dtype(dtype: Any) -> Iterator[None]:
    """Temporarily change the dtype used for new constants."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype)
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


# ---------------------------------------------------------------------------
#  Tensor
# ---------------------------------------------------------------------------
class Tensor:
    """Dense tensor that records the operation that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_ctx", "name")
    # Makes ``ndarray <op> Tensor`` dispatch to the Tensor reflected operator.
    __array_priority__ = 100.0

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        *,
        _ctx: Optional["Function"] = None,
        name: str = "",
    ) -> None:
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(_DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._ctx = _ctx
        self.name = name

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"

    # -- reverse mode --------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf that requires grad."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.data.dtype)
        if grad.shape != self.shape:
            raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _topological_order(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            ctx = node._ctx
            if ctx is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g.astype(node.grad.dtype)
                continue
            for parent, parent_grad in zip(ctx.parents, ctx.backward(g)):
                if parent_grad is None or not parent.requires_grad:
                    continue
                parent_grad = np.asarray(parent_grad, dtype=parent.data.dtype)
                key = id(parent)
                pending[key] = pending[key] + parent_grad if key in pending else parent_grad


def _topological_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order walk of the recorded graph."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in node._ctx.parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
    return order


class Parameter(Tensor):
    """Trainable leaf. ``grad`` always has the same shape as ``data``."""

    __slots__ = ()

    def __init__(self, data: Any, name: str = "") -> None:
        arr = np.array(data, copy=True)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        super().__init__(arr, True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self


def as_tensor(x: Any) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_DEFAULT_DTYPE) if not isinstance(x, np.ndarray) else x)


# ---------------------------------------------------------------------------
#  Function
# ---------------------------------------------------------------------------
class Function:
    """
    One recorded operation. Subclasses implement ``forward`` on raw arrays and
    ``backward`` returning one gradient (or None) per tensor input.
    """

    def __init__(self, *parents: Tensor) -> None:
        self.parents: Tuple[Tensor, ...] = parents

    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:  # pragma: no cover
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[Optional[np.ndarray]]:  # pragma: no cover
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Any, **kwargs: Any) -> Tensor:
        tensors = tuple(as_tensor(x) for x in inputs)
        fn = cls(*tensors)
        out = fn.forward(*(t.data for t in tensors), **kwargs)
        track = _GRAD_ENABLED and any(t.requires_grad for t in tensors)
        return Tensor(out, track, _ctx=fn if track else None)


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad
