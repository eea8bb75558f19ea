# src/encoder.py
"""
Dual-branch audio encoder.

The coarse branch is a patch-embedding Transformer producing ``T_c`` frames;
the fine branch is a small CNN producing ``T = T_c * upsample_factor`` frames.
They are fused as ``E = fine + upsample(coarse)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .model_config import ModelConfig
from .numerics import ops
from .numerics.conv_ops import avg_pool2d, conv2d
from .numerics.core_defs import ConfigurationError, DimensionError, Parameter, Tensor, as_tensor
from .numerics.layers import EncoderBlock, LayerNorm, Linear, Module, sinusoidal_encoding, xavier_uniform

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class CoarseFeatures:
    values: Tensor  # [T_c, D]
    frames_per_second: float


# ---------------------------------------------------------------------------
#  Coarse branch
# ---------------------------------------------------------------------------
class CoarseEncoder(Module):
    """Patch embedding, positional encodings, post-norm encoder blocks, frequency mean."""

    def __init__(self, cfg: ModelConfig, mel_bins: int, rng: np.random.Generator) -> None:
        self.patch_time = cfg.patch_time
        self.patch_freq = cfg.patch_freq or mel_bins
        if mel_bins % self.patch_freq:
            raise ConfigurationError(f"mel_bins {mel_bins} not divisible by patch_freq {self.patch_freq}")
        self.freq_patches = mel_bins // self.patch_freq
        self.dim = cfg.dim
        self.patch_embed = Linear(self.patch_time * self.patch_freq, cfg.dim, rng)
        self.freq_embed = Parameter(np.zeros((self.freq_patches, cfg.dim), np.float32))
        self.blocks = [EncoderBlock(cfg.dim, cfg.heads, cfg.ffn_ratio, rng) for _ in range(cfg.backbone_blocks)]

    def forward(self, mel: Tensor) -> Tensor:
        frames, bins = mel.shape
        if frames % self.patch_time:
            raise ConfigurationError(f"{frames} frames not divisible by patch_time {self.patch_time}")
        t_c, fp = frames // self.patch_time, self.freq_patches
        # [frames, bins] -> [T_c, F_p, patch_time * patch_freq]
        grid = ops.reshape(mel, (t_c, self.patch_time, fp, self.patch_freq))
        grid = ops.transpose(grid, (0, 2, 1, 3))
        tokens = self.patch_embed(ops.reshape(grid, (t_c * fp, self.patch_time * self.patch_freq)))
        time_pe = np.repeat(sinusoidal_encoding(t_c, self.dim), fp, axis=0)
        freq_pe = ops.reshape(ops.concat([self.freq_embed] * t_c, axis=0), (t_c * fp, self.dim))
        x = tokens + time_pe + freq_pe
        for block in self.blocks:
            x = block(x)
        return ops.mean(ops.reshape(x, (t_c, fp, self.dim)), axis=1)


# ---------------------------------------------------------------------------
#  Fine branch
# ---------------------------------------------------------------------------
class ConvBlock(Module):
    """3x3 conv -> layer norm over channels -> GELU -> average pool."""

    def __init__(self, c_in: int, c_out: int, pool: Tuple[int, int], rng: np.random.Generator) -> None:
        fan_in, fan_out = c_in * 9, c_out * 9
        self.kernel = Parameter(xavier_uniform(rng, fan_in, fan_out, (c_out, c_in, 3, 3)))
        self.bias = Parameter(np.zeros(c_out, np.float32))
        self.norm = LayerNorm(c_out)
        self.pool = pool

    def forward(self, x: Tensor) -> Tensor:
        x = conv2d(x, self.kernel, self.bias, stride=1, padding=1)
        x = ops.transpose(self.norm(ops.transpose(x, (1, 2, 0))), (2, 0, 1))
        x = ops.gelu(x)
        if self.pool != (1, 1):
            x = avg_pool2d(x, self.pool)
        return x


class FineEncoder(Module):
    def __init__(self, cfg: ModelConfig, mel_bins: int, rng: np.random.Generator) -> None:
        channels = (1,) + tuple(cfg.cnn_channels)
        self.blocks = [
            ConvBlock(channels[i], channels[i + 1], (cfg.cnn_freq_pool[i], cfg.cnn_time_pool[i]), rng)
            for i in range(len(cfg.cnn_channels))
        ]
        self.time_pool = cfg.time_pool_product
        self.proj = Linear(channels[-1], cfg.dim, rng)

    def forward(self, mel: Tensor) -> Tensor:
        frames, bins = mel.shape
        if frames % self.time_pool:
            raise ConfigurationError(f"{frames} frames not divisible by CNN time pooling {self.time_pool}")
        x = ops.reshape(ops.transpose(mel), (1, bins, frames))
        for block in self.blocks:
            x = block(x)
        x = ops.mean(x, axis=1)  # [C, T]
        return self.proj(ops.transpose(x))

    def receptive_field(self) -> Tuple[int, int, int]:
        """(size, jump, offset) in input frames: output t sees [t*jump + offset, t*jump + offset + size)."""
        size, jump, offset = 1, 1, 0
        for block in self.blocks:
            size += 2 * jump
            offset -= jump
            pool = block.pool[1]
            size += (pool - 1) * jump
            jump *= pool
        return size, jump, offset

    def input_span(self, t: int) -> Tuple[int, int]:
        size, jump, offset = self.receptive_field()
        start = t * jump + offset
        return start, start + size - 1


# ---------------------------------------------------------------------------
#  Fusion
# ---------------------------------------------------------------------------
def fuse(fine: Tensor, coarse: Tensor, factor: int) -> Tensor:
    fine, coarse = as_tensor(fine), as_tensor(coarse)
    if fine.ndim != 2 or coarse.ndim != 2 or fine.shape != (coarse.shape[0] * factor, coarse.shape[1]):
        raise DimensionError(f"cannot fuse fine {fine.shape} with coarse {coarse.shape} at factor {factor}")
    return fine + ops.linear_upsample(coarse, factor)


class DualBranchEncoder(Module):
    def __init__(self, cfg: ModelConfig, mel_bins: int, hop_seconds: float, rng: np.random.Generator) -> None:
        self.coarse = CoarseEncoder(cfg, mel_bins, rng)
        self.fine = FineEncoder(cfg, mel_bins, rng)
        self.factor = cfg.upsample_factor
        self.coarse_fps = 1.0 / (hop_seconds * cfg.patch_time)

    @property
    def fused_fps(self) -> float:
        return self.coarse_fps * self.factor

    def coarse_encode(self, mel: Tensor) -> CoarseFeatures:
        return CoarseFeatures(self.coarse(as_tensor(mel)), self.coarse_fps)

    def fine_encode(self, mel: Tensor) -> Tensor:
        return self.fine(as_tensor(mel))

    def forward(self, mel: Tensor) -> Tuple[Tensor, CoarseFeatures]:
        mel = as_tensor(mel)
        coarse = self.coarse_encode(mel)
        return fuse(self.fine_encode(mel), coarse.values, self.factor), coarse

    def backbone_parameters(self) -> List[Parameter]:
        return self.coarse.parameters()
