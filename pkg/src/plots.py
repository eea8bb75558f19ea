# src/plots.py
"""SVG figures: ROC curves, detection timelines and the query-duration sweep."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .events import Event  # noqa: E402
from .psds import PSDSResult  # noqa: E402

logger = logging.getLogger(__name__)


def _save(fig, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    logger.debug("figure written: %s", path)
    return path


def plot_roc(results: Mapping[str, PSDSResult], path: Union[str, Path], e_max: float = 100.0) -> Path:
    """One step curve per labelled result (e.g. all / common / rare)."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, result in results.items():
        if not result.curve:
            continue
        xs = [x for x, _ in result.curve] + [e_max]
        ys = [y for _, y in result.curve] + [result.curve[-1][1]]
        ax.step(xs, ys, where="post", label=f"{label} ({result.score:.3f})")
    ax.set_xlim(0, e_max)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("eFPR (per hour)")
    ax.set_ylabel("effective TPR")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_timeline(
    clip_id: str,
    references: Sequence[Event],
    detections: Sequence[Event],
    class_ids: Sequence[str],
    duration: float,
    path: Union[str, Path],
    threshold: Optional[float] = None,
) -> Path:
    """Reference spans on top, detections underneath, one row per class."""
    rows = {c: i for i, c in enumerate(class_ids)}
    fig, ax = plt.subplots(figsize=(8, 0.4 * len(class_ids) + 1.2))
    for ev in references:
        if ev.class_id in rows:
            ax.broken_barh([(ev.onset, ev.duration)], (rows[ev.class_id] + 0.05, 0.4), color="tab:green")
    for ev in detections:
        if ev.class_id in rows:
            ax.broken_barh([(ev.onset, ev.duration)], (rows[ev.class_id] + 0.5, 0.4), color="tab:orange")
    ax.set_yticks([i + 0.5 for i in rows.values()])
    ax.set_yticklabels(list(rows))
    ax.set_xlim(0, duration)
    ax.set_ylim(0, len(rows))
    ax.set_xlabel("time (s)")
    suffix = f" @ {threshold:.2f}" if threshold is not None else ""
    ax.set_title(f"{clip_id}: reference (green) / detected (orange){suffix}")
    return _save(fig, path)


def plot_sweep(rows: List[Dict[str, float]], path: Union[str, Path]) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [r["duration_s"] for r in rows]
    ys = [r["psds_r"] if r["psds_r"] is not None else float("nan") for r in rows]
    ax.plot(xs, ys, marker="o")
    ax.set_xscale("log")
    ax.set_xlabel("audio query duration (s)")
    ax.set_ylabel("PSDS (rare classes)")
    ax.grid(alpha=0.3)
    return _save(fig, path)
