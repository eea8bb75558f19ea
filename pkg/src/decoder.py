# src/decoder.py
"""
Dual-stream decoder.

Event stream: query self-attention (masked at inference), cross-attention to
the coarse audio features, then a clip head (presence probability per query)
and a map head (per-query classifier vector).

Context stream: Conformer blocks over the fused frame sequence.

Frame scores combine both streams:

    frame[t, i] = sigmoid(z_t . c_i) * clip[i]

so a class that is absent from the clip is absent from every frame.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .encoder import CoarseFeatures, DualBranchEncoder
from .model_config import ModelConfig
from .numerics import ops
from .numerics.conv_ops import depthwise_conv1d
from .numerics.core_defs import ConfigurationError, DimensionError, Parameter, Tensor, as_tensor
from .numerics.layers import (
    FeedForward,
    LayerNorm,
    Linear,
    MLP,
    Module,
    MultiHeadAttention,
    sinusoidal_encoding,
    xavier_uniform,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
#  Query attention masks
# ---------------------------------------------------------------------------
class MaskStrategy(str, enum.Enum):
    TRAIN = "train"          # no masking
    INVISIBLE = "invisible"  # base and novel blocks do not see each other
    VISIBLE = "visible"      # novel rows also see base columns


@dataclass(frozen=True)
class QueryAttentionMask:
    allowed: np.ndarray  # [N, N] bool, row attends column
    strategy: MaskStrategy

    @property
    def hidden(self) -> np.ndarray:
        return ~self.allowed


def build_mask(n_base: int, n_novel: int, strategy: MaskStrategy | str, novel_self_only: bool = False) -> QueryAttentionMask:
    strategy = MaskStrategy(strategy)
    if n_base < 1 or n_novel < 0:
        raise ConfigurationError(f"mask needs n_base >= 1 and n_novel >= 0, got {n_base}, {n_novel}")
    n = n_base + n_novel
    allowed = np.ones((n, n), dtype=bool)
    if strategy is not MaskStrategy.TRAIN and n_novel:
        allowed[:n_base, n_base:] = False
        if strategy is MaskStrategy.INVISIBLE:
            allowed[n_base:, :n_base] = False
            if novel_self_only:
                allowed[n_base:, n_base:] = np.eye(n_novel, dtype=bool)
    return QueryAttentionMask(allowed, strategy)


# ---------------------------------------------------------------------------
#  Event stream
# ---------------------------------------------------------------------------
class DecoderBlock(Module):
    """Post-norm block: masked self-attention, cross-attention, FFN."""

    def __init__(self, dim: int, heads: int, ffn_ratio: float, rng: np.random.Generator) -> None:
        self.self_attn = MultiHeadAttention(dim, heads, rng)
        self.norm1 = LayerNorm(dim)
        self.cross_attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_ratio, rng)
        self.norm3 = LayerNorm(dim)

    def forward(self, q: Tensor, memory: Tensor, keys: Tensor, hidden: Optional[np.ndarray]) -> Tensor:
        q = self.norm1(q + self.self_attn(q, q, q, hidden))
        q = self.norm2(q + self.cross_attn(q, keys, memory))
        return self.norm3(q + self.ffn(q))


class EventDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        self.blocks = [DecoderBlock(cfg.dim, cfg.heads, cfg.ffn_ratio, rng) for _ in range(cfg.decoder_blocks)]
        self.key_positional = cfg.key_positional

    def forward(self, queries: Tensor, coarse: CoarseFeatures, mask: Optional[QueryAttentionMask] = None) -> Tensor:
        queries, memory = as_tensor(queries), coarse.values
        if queries.ndim != 2 or queries.shape[1] != memory.shape[1] or queries.shape[0] < 1:
            raise DimensionError(f"queries {queries.shape} do not match coarse features {memory.shape}")
        hidden = None
        if mask is not None:
            if mask.allowed.shape != (queries.shape[0],) * 2:
                raise DimensionError(f"mask {mask.allowed.shape} does not match {queries.shape[0]} queries")
            hidden = mask.hidden if not mask.allowed.all() else None
        keys = memory + sinusoidal_encoding(*memory.shape) if self.key_positional else memory
        x = queries
        for block in self.blocks:
            x = block(x, memory, keys, hidden)
        return x


class ClipHead(MLP):
    """Two-layer MLP + sigmoid: clip presence per refined query."""

    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        super().__init__([dim, dim, 1], rng)

    def forward(self, refined: Tensor) -> Tensor:
        return ops.sigmoid(ops.reshape(super().forward(refined), (-1,)))


class MapHead(MLP):
    """Three-layer MLP: refined query -> classifier vector."""

    def __init__(self, dim: int, rng: np.random.Generator) -> None:
        super().__init__([dim, dim, dim, dim], rng)


# ---------------------------------------------------------------------------
#  Context stream
# ---------------------------------------------------------------------------
class ConformerFeedForward(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4) -> None:
        self.norm = LayerNorm(dim)
        self.up = Linear(dim, dim * expansion, rng)
        self.down = Linear(dim * expansion, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.down(ops.silu(self.up(self.norm(x))))


class ConvModule(Module):
    """LN -> pointwise (2D) -> GLU -> depthwise conv -> LN -> SiLU -> pointwise."""

    def __init__(self, dim: int, kernel: int, rng: np.random.Generator) -> None:
        self.norm = LayerNorm(dim)
        self.pointwise_in = Linear(dim, 2 * dim, rng)
        self.depthwise = Parameter(xavier_uniform(rng, kernel, kernel, (kernel, dim)))
        self.depthwise_bias = Parameter(np.zeros(dim, np.float32))
        self.conv_norm = LayerNorm(dim)
        self.pointwise_out = Linear(dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = ops.glu(self.pointwise_in(self.norm(x)), axis=-1)
        x = depthwise_conv1d(x, self.depthwise, self.depthwise_bias)
        return self.pointwise_out(ops.silu(self.conv_norm(x)))


class ConformerBlock(Module):
    def __init__(self, dim: int, heads: int, kernel: int, rng: np.random.Generator) -> None:
        self.ff1 = ConformerFeedForward(dim, rng)
        self.attn_norm = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.conv = ConvModule(dim, kernel, rng)
        self.ff2 = ConformerFeedForward(dim, rng)
        self.out_norm = LayerNorm(dim)
        self.attention_enabled = True

    def forward(self, x: Tensor) -> Tensor:
        x = x + 0.5 * self.ff1(x)
        if self.attention_enabled:
            h = self.attn_norm(x)
            x = x + self.attn(h, h, h)
        x = x + self.conv(x)
        x = x + 0.5 * self.ff2(x)
        return self.out_norm(x)


class ContextNetwork(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator) -> None:
        self.blocks = [ConformerBlock(cfg.dim, cfg.heads, cfg.conformer_kernel, rng) for _ in range(cfg.conformer_blocks)]
        self.kernel = cfg.conformer_kernel

    @property
    def attention_enabled(self) -> bool:
        return all(b.attention_enabled for b in self.blocks)

    @attention_enabled.setter
    def attention_enabled(self, value: bool) -> None:
        for b in self.blocks:
            b.attention_enabled = value

    @property
    def conv_radius(self) -> int:
        """Frames reachable through the convolution modules alone."""
        return len(self.blocks) * (self.kernel // 2)

    def forward(self, fused: Tensor) -> Tensor:
        x = as_tensor(fused)
        for block in self.blocks:
            x = block(x)
        return x


# ---------------------------------------------------------------------------
#  Prediction
# ---------------------------------------------------------------------------
@dataclass
class PredictionGrid:
    clip: Tensor   # [N]
    frame: Tensor  # [T, N]
    extras: Dict[str, Tensor] = field(default_factory=dict)


def frame_prediction(z: Tensor, classifiers: Tensor, clip: Tensor, clip_prior: bool = True) -> Tensor:
    z, classifiers, clip = as_tensor(z), as_tensor(classifiers), as_tensor(clip)
    if z.shape[1] != classifiers.shape[1] or classifiers.shape[0] != clip.shape[0]:
        raise DimensionError(f"frame_prediction shapes z={z.shape} c={classifiers.shape} clip={clip.shape}")
    conditional = ops.sigmoid(z @ ops.transpose(classifiers))
    return conditional * clip if clip_prior else conditional


class DASM(Module):
    """
    Full detector. ``cfg.head == "linear"`` swaps the query-driven decoder for a
    fixed linear classifier over ``class_ids`` (closed-set baseline).
    """

    def __init__(
        self,
        cfg: ModelConfig,
        mel_bins: int,
        hop_seconds: float,
        class_ids: Sequence[str] = (),
    ) -> None:
        rng = np.random.default_rng(cfg.init_seed)
        self.cfg = cfg
        self.encoder = DualBranchEncoder(cfg, mel_bins, hop_seconds, rng)
        self.context = ContextNetwork(cfg, rng) if cfg.context_network else None
        self.class_ids = list(class_ids)
        self.event_decoder = self.clip_head = self.map_head = None
        self.match_proj = self.match_scale = self.match_bias = None
        self.linear_head = None
        if cfg.head == "linear":
            if not self.class_ids:
                raise ConfigurationError("the linear head needs a fixed class list")
            self.linear_head = Linear(cfg.dim, len(self.class_ids), rng)
        elif cfg.event_decoder:
            self.event_decoder = EventDecoder(cfg, rng)
            self.clip_head = ClipHead(cfg.dim, rng)
            self.map_head = MapHead(cfg.dim, rng)
        else:
            self.match_proj = Linear(cfg.dim, cfg.dim, rng)
            self.match_scale = Parameter(np.array([10.0], np.float32))
            self.match_bias = Parameter(np.array([-5.0], np.float32))

    @property
    def frames_per_second(self) -> float:
        return self.encoder.fused_fps

    def backbone_parameters(self) -> List[Parameter]:
        return self.encoder.backbone_parameters()

    def head_parameters(self) -> List[Parameter]:
        backbone = {id(p) for p in self.backbone_parameters()}
        return [p for p in self.parameters() if id(p) not in backbone]

    def forward(self, mel: Tensor, queries: Optional[Tensor] = None, mask: Optional[QueryAttentionMask] = None) -> PredictionGrid:
        fused, coarse = self.encoder(mel)
        z = self.context(fused) if self.context is not None else fused

        if self.linear_head is not None:
            frame = ops.sigmoid(self.linear_head(z))
            return PredictionGrid(ops.amax(frame, axis=0), frame)

        if queries is None:
            raise ConfigurationError("query-driven heads need a query matrix")
        queries = as_tensor(queries)
        if queries.ndim != 2 or queries.shape[1] != self.cfg.dim:
            raise DimensionError(f"queries {queries.shape} do not match model dim {self.cfg.dim}")

        if self.event_decoder is None:
            frame = ops.sigmoid(_cosine(self.match_proj(z), queries) * self.match_scale + self.match_bias)
            return PredictionGrid(ops.amax(frame, axis=0), frame)

        refined = self.event_decoder(queries, coarse, mask)
        clip = self.clip_head(refined)
        classifiers = self.map_head(refined)
        frame = frame_prediction(z, classifiers, clip, self.cfg.clip_prior)
        return PredictionGrid(clip, frame, {"refined": refined, "classifiers": classifiers, "context": z})


def _cosine(a: Tensor, b: Tensor, eps: float = 1e-6) -> Tensor:
    na = ops.power(ops.sum_(a * a, axis=-1, keepdims=True) + eps, 0.5)
    nb = ops.power(ops.sum_(b * b, axis=-1, keepdims=True) + eps, 0.5)
    return (a / na) @ ops.transpose(b / nb)


def dasm_forward(
    model: DASM,
    mel: np.ndarray,
    queries: np.ndarray,
    strategy: MaskStrategy | str = MaskStrategy.TRAIN,
    n_base: Optional[int] = None,
) -> PredictionGrid:
    """Forward pass with the query mask for ``strategy``; ``n_base`` defaults to all queries."""
    n = queries.shape[0]
    n_base = n if n_base is None else n_base
    mask = build_mask(n_base, n - n_base, strategy, model.cfg.novel_self_only) if n else None
    return model(mel, queries, mask)
