# src/numerics/__init__.py
"""
numerics package
================

Dense tensors with reverse-mode differentiation, the layers and optimizer the
detector is built from, a finite-difference gradient checker and the
checkpoint archive.
"""

from .core_defs import (
    ConfigurationError,
    DegenerateRowError,
    DimensionError,
    EvaluationError,
    Function,
    Parameter,
    Tensor,
    as_tensor,
    default_dtype,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
)
from . import tensor_ops as ops
from .tensor_ops import (
    layer_norm,
    linear_upsample,
    masked_softmax,
    matmul,
)
from .conv_ops import avg_pool2d, conv2d, depthwise_conv1d
from .attention_ops import multi_head_attention
from .layers import (
    EncoderBlock,
    FeedForward,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    sinusoidal_encoding,
)
from .optim import AdamW, ParamGroup
from .grad_check import grad_check
from .checkpoint import CompatibilityError, file_hash, load_checkpoint, save_checkpoint

__all__ = [
    "AdamW",
    "CompatibilityError",
    "ConfigurationError",
    "DegenerateRowError",
    "DimensionError",
    "EncoderBlock",
    "EvaluationError",
    "FeedForward",
    "Function",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "MultiHeadAttention",
    "ParamGroup",
    "Parameter",
    "Tensor",
    "as_tensor",
    "avg_pool2d",
    "conv2d",
    "default_dtype",
    "depthwise_conv1d",
    "file_hash",
    "get_default_dtype",
    "grad_check",
    "is_grad_enabled",
    "layer_norm",
    "linear_upsample",
    "load_checkpoint",
    "masked_softmax",
    "matmul",
    "multi_head_attention",
    "no_grad",
    "ops",
    "save_checkpoint",
    "sinusoidal_encoding",
]
