# src/numerics/attention_ops.py
"""Scaled dot-product attention split across heads."""

from __future__ import annotations

import logging
import math
from typing import Any, Mapping, Optional

import numpy as np

from .core_defs import ConfigurationError, DimensionError, Tensor, as_tensor
from . import tensor_ops as ops

logger = logging.getLogger(__name__)

PROJECTION_KEYS = ("wq", "wk", "wv", "wo")


def _project(x: Tensor, weight: Tensor, bias: Optional[Tensor]) -> Tensor:
    out = x @ weight
    return out + bias if bias is not None else out


def _split_heads(x: Tensor, heads: int) -> Tensor:
    length, dim = x.shape
    return ops.transpose(ops.reshape(x, (length, heads, dim // heads)), (1, 0, 2))


def multi_head_attention(
    q: Any,
    k: Any,
    v: Any,
    heads: int,
    proj: Mapping[str, Tensor],
    mask: Optional[np.ndarray] = None,
    *,
    project_output: bool = True,
) -> Tensor:
    """
    ``q`` is [Lq, D], ``k``/``v`` are [Lk, D]. ``proj`` holds ``wq wk wv wo``
    ([D, D]) and optional ``bq bk bv bo``. ``mask`` is boolean [Lq, Lk] with
    True marking hidden keys. With ``project_output=False`` the merged head
    outputs are returned before the output projection.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    dim = q.shape[-1]
    if heads < 1 or dim % heads:
        raise ConfigurationError(f"model dimension {dim} is not divisible by {heads} heads")
    if k.shape[-1] != dim or v.shape[-1] != dim or k.shape[0] != v.shape[0]:
        raise DimensionError(f"attention shapes q={q.shape} k={k.shape} v={v.shape} disagree")
    missing = [key for key in PROJECTION_KEYS if key not in proj]
    if missing:
        raise ConfigurationError(f"attention projections missing: {missing}")
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (q.shape[0], k.shape[0]):
            raise DimensionError(f"attention mask shape {mask.shape} != {(q.shape[0], k.shape[0])}")
        mask = mask[None, :, :]

    head_dim = dim // heads
    qh = _split_heads(_project(q, proj["wq"], proj.get("bq")), heads)
    kh = _split_heads(_project(k, proj["wk"], proj.get("bk")), heads)
    vh = _split_heads(_project(v, proj["wv"], proj.get("bv")), heads)

    scores = (qh @ ops.transpose(kh, (0, 2, 1))) * (1.0 / math.sqrt(head_dim))
    weights = ops.masked_softmax(scores, mask, axis=-1)
    merged = ops.reshape(ops.transpose(weights @ vh, (1, 0, 2)), (q.shape[0], dim))
    if not project_output:
        return merged
    return _project(merged, proj["wo"], proj.get("bo"))
