# src/postprocess.py
"""Frame posteriors -> smoothed scores -> event lists."""

from __future__ import annotations

import logging
from typing import Dict, List, Mapping, Sequence

import numpy as np
from scipy import ndimage

from .events import Event, Roster
from .numerics.core_defs import ConfigurationError

logger = logging.getLogger(__name__)


def default_thresholds(n: int = 50) -> List[float]:
    """``n`` operating points spread uniformly over [0.01, 0.99]."""
    if n < 2:
        raise ConfigurationError(f"need at least 2 operating thresholds, got {n}")
    return [round(float(x), 6) for x in np.linspace(0.01, 0.99, n)]


def median_filter(scores: np.ndarray, window: int = 5) -> np.ndarray:
    """Per-column running median over time with edge replication."""
    scores = np.asarray(scores)
    if scores.ndim != 2:
        raise ConfigurationError(f"median_filter expects [frames, classes], got {scores.shape}")
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"median window must be a positive odd count, got {window}")
    if window > scores.shape[0]:
        raise ConfigurationError(f"median window {window} exceeds {scores.shape[0]} frames")
    if window == 1:
        return scores.copy()
    return ndimage.median_filter(scores, size=(window, 1), mode="nearest")


def extract_events(
    scores: np.ndarray,
    threshold: float,
    frame_seconds: float,
    class_ids: Sequence[str],
) -> List[Event]:
    """
    Maximal runs of frames scoring >= ``threshold`` become events. The onset
    is the start of the first frame, the offset the end of the last one, and
    the event score is the peak inside the run.
    """
    if not 0.0 < threshold < 1.0:
        raise ConfigurationError(f"threshold {threshold} outside (0, 1)")
    scores = np.asarray(scores)
    if scores.ndim != 2 or scores.shape[1] != len(class_ids):
        raise ConfigurationError(f"scores {scores.shape} do not match {len(class_ids)} classes")
    active = scores >= threshold
    padded = np.zeros((active.shape[0] + 2, active.shape[1]), dtype=np.int8)
    padded[1:-1] = active
    edges = np.diff(padded, axis=0)
    events: List[Event] = []
    for j, class_id in enumerate(class_ids):
        starts = np.flatnonzero(edges[:, j] == 1)
        stops = np.flatnonzero(edges[:, j] == -1)
        for a, b in zip(starts, stops):
            events.append(
                Event(round(a * frame_seconds, 6), round(b * frame_seconds, 6), class_id, float(scores[a:b, j].max()))
            )
    return sorted(events)


def detect(
    scores: np.ndarray,
    thresholds: Sequence[float],
    frame_seconds: float,
    class_ids: Sequence[str],
    window: int = 5,
) -> Dict[float, List[Event]]:
    """Median-filter once, then extract events at every threshold."""
    smoothed = median_filter(scores, min(window, _largest_odd(scores.shape[0])))
    return {float(t): extract_events(smoothed, t, frame_seconds, class_ids) for t in thresholds}


def _largest_odd(n: int) -> int:
    return n if n % 2 else max(1, n - 1)


def per_threshold_rosters(per_clip: Mapping[str, Mapping[float, List[Event]]]) -> Dict[float, Roster]:
    """{clip: {threshold: events}} -> {threshold: {clip: events}}."""
    out: Dict[float, Roster] = {}
    for clip, by_threshold in per_clip.items():
        for t, events in by_threshold.items():
            out.setdefault(float(t), {})[clip] = list(events)
    return out


# ---------------------------------------------------------------------------
#  Frame-level F1
# ---------------------------------------------------------------------------
def frame_macro_f1(predicted: np.ndarray, targets: np.ndarray, threshold: float = 0.5) -> float:
    """
    Mean over classes of 2TP / (2TP + FP + FN) with predictions binarised at ``threshold``.
    Classes absent from both grids are skipped; with none left the score is 1.
    """
    predicted = np.asarray(predicted) >= threshold
    targets = np.asarray(targets) > 0.5
    if predicted.shape != targets.shape:
        raise ConfigurationError(f"prediction grid {predicted.shape} != target grid {targets.shape}")
    tp = (predicted & targets).sum(axis=0)
    fp = (predicted & ~targets).sum(axis=0)
    fn = (~predicted & targets).sum(axis=0)
    denom = 2 * tp + fp + fn
    keep = denom > 0
    if not keep.any():
        return 1.0
    return float(np.mean(2 * tp[keep] / denom[keep]))
