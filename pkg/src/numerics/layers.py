# src/numerics/layers.py
"""
Parameter containers built on the tensor kernel.

``Module`` discovers parameters by walking its attributes (including lists of
sub-modules), so every parameter gets a stable dotted name path such as
``event_decoder.blocks.0.self_attn.wq``. Those paths are the checkpoint keys.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .attention_ops import multi_head_attention
from .core_defs import ConfigurationError, DimensionError, Parameter, Tensor
from . import tensor_ops as ops

logger = logging.getLogger(__name__)

ACTIVATIONS = {
    "gelu": ops.gelu,
    "silu": ops.silu,
    "tanh": ops.tanh,
    "sigmoid": ops.sigmoid,
}


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


# ---------------------------------------------------------------------------
#  Module base
# ---------------------------------------------------------------------------
class Module:
    def __call__(self, *args: Any, **kwargs: Any) -> Any:
        return self.forward(*args, **kwargs)

    def forward(self, *args: Any, **kwargs: Any) -> Any:  # pragma: no cover
        raise NotImplementedError

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{path}.{i}", item

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ConfigurationError(f"state dict mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, param in own.items():
            if name not in state:
                continue
            arr = np.asarray(state[name])
            if arr.shape != param.shape:
                raise DimensionError(f"parameter {name}: stored shape {arr.shape} != model shape {param.shape}")
            param.data = arr.astype(param.dtype, copy=True)
            param.zero_grad()


# ---------------------------------------------------------------------------
#  Basic layers
# ---------------------------------------------------------------------------
class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as [in, out]."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True, zero_init: bool = False) -> None:
        shape = (in_dim, out_dim)
        init = np.zeros(shape, np.float32) if zero_init else xavier_uniform(rng, in_dim, out_dim, shape)
        self.weight = Parameter(init)
        self.bias = Parameter(np.zeros(out_dim, np.float32)) if bias else None

    def forward(self, x: Any) -> Tensor:
        out = ops.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        self.gain = Parameter(np.ones(dim, np.float32))
        self.bias = Parameter(np.zeros(dim, np.float32))
        self.eps = eps

    def forward(self, x: Any) -> Tensor:
        return ops.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """Stack of linear layers with an activation between consecutive layers."""

    def __init__(self, dims: Sequence[int], rng: np.random.Generator, activation: str = "gelu") -> None:
        if len(dims) < 2:
            raise ConfigurationError(f"MLP needs at least input and output widths, got {list(dims)}")
        if activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]
        self.activation = activation

    def forward(self, x: Any) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x


class FeedForward(MLP):
    def __init__(self, dim: int, ratio: float, rng: np.random.Generator, activation: str = "gelu") -> None:
        hidden = max(1, int(round(dim * ratio)))
        super().__init__([dim, hidden, dim], rng, activation)


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator) -> None:
        if dim % heads:
            raise ConfigurationError(f"model dimension {dim} is not divisible by {heads} heads")
        self.heads = heads
        for key in ("q", "k", "v", "o"):
            setattr(self, f"w{key}", Parameter(xavier_uniform(rng, dim, dim, (dim, dim))))
            setattr(self, f"b{key}", Parameter(np.zeros(dim, np.float32)))

    def projections(self) -> Dict[str, Tensor]:
        return {name: getattr(self, name) for name in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo")}

    def forward(self, q: Any, k: Any, v: Any, mask: Optional[np.ndarray] = None) -> Tensor:
        return multi_head_attention(q, k, v, self.heads, self.projections(), mask)


class EncoderBlock(Module):
    """Post-norm Transformer encoder block: attention then FFN, each residual + layer norm."""

    def __init__(self, dim: int, heads: int, ffn_ratio: float, rng: np.random.Generator) -> None:
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, rng)
        self.norm2 = LayerNorm(dim)

    def forward(self, x: Tensor, mask: Optional[np.ndarray] = None) -> Tensor:
        x = self.norm1(x + self.self_attn(x, x, x, mask))
        return self.norm2(x + self.ffn(x))


def sinusoidal_encoding(length: int, dim: int) -> np.ndarray:
    """[length, dim] sine/cosine table, float32."""
    position = np.arange(length, dtype=np.float64)[:, None]
    div = np.exp(np.arange(0, dim, 2, dtype=np.float64) * (-math.log(10000.0) / dim))
    table = np.zeros((length, dim), dtype=np.float64)
    table[:, 0::2] = np.sin(position * div)
    table[:, 1::2] = np.cos(position * div[: dim // 2])
    return table.astype(np.float32)
