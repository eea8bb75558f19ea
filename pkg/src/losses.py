# src/losses.py
"""Asymmetric focal loss and the combined frame + clip objective."""

from __future__ import annotations

import logging
from typing import Dict, Optional, Tuple

import numpy as np

from .decoder import PredictionGrid
from .events import ValidationError
from .model_config import LossConfig
from .numerics import ops
from .numerics.core_defs import Tensor, as_tensor

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-7


def asymmetric_focal_loss(p: Tensor, y: np.ndarray, cfg: LossConfig) -> Tensor:
    """
    Mean over elements of

        -y (1 - p)^gamma_pos ln p  -  (1 - y) p_m^gamma_neg ln(1 - p_m),   p_m = max(p - margin, 0)

    with ``p`` clamped to [1e-7, 1 - 1e-7].
    """
    p = ops.clip(as_tensor(p), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=p.dtype)
    if y.shape != p.shape:
        raise ValidationError(f"target shape {y.shape} != prediction shape {p.shape}")

    pos = ops.log(p)
    if cfg.gamma_pos:
        pos = pos * ops.power(1.0 - p, cfg.gamma_pos)
    p_m = ops.clip(p - cfg.prob_margin, 0.0, None) if cfg.prob_margin else p
    neg = ops.log(1.0 - p_m)
    if cfg.gamma_neg:
        neg = neg * ops.power(p_m, cfg.gamma_neg)
    return -ops.mean(pos * y + neg * (1.0 - y))


def clip_targets_from_frames(frame_targets: np.ndarray) -> np.ndarray:
    return frame_targets.max(axis=0) if frame_targets.shape[0] else np.zeros(frame_targets.shape[1], frame_targets.dtype)


def check_targets(frame_targets: np.ndarray, clip_targets: np.ndarray, tol: float = 1e-6) -> None:
    bad = np.flatnonzero(clip_targets + tol < frame_targets.max(axis=0))
    if bad.size:
        raise ValidationError(f"clip targets below frame targets for query columns {bad.tolist()}")


def total_loss(
    pred: PredictionGrid,
    frame_targets: np.ndarray,
    cfg: LossConfig,
    clip_targets: Optional[np.ndarray] = None,
) -> Tuple[Tensor, Dict[str, float]]:
    """``frame_loss + alpha * clip_loss``; clip targets default to the per-column max of frame targets."""
    if pred.frame.shape != frame_targets.shape:
        raise ValidationError(f"frame targets {frame_targets.shape} != predictions {pred.frame.shape}")
    if clip_targets is None:
        clip_targets = clip_targets_from_frames(frame_targets)
    check_targets(frame_targets, clip_targets)
    frame_loss = asymmetric_focal_loss(pred.frame, frame_targets, cfg)
    clip_loss = asymmetric_focal_loss(pred.clip, clip_targets, cfg)
    total = frame_loss + cfg.alpha * clip_loss if cfg.alpha else frame_loss
    return total, {"loss": total.item(), "frame_loss": frame_loss.item(), "clip_loss": clip_loss.item()}
