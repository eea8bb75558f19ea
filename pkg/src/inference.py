# src/inference.py
"""Run a trained detector over clips and persist the resulting detections."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset_io import Split
from .decoder import DASM, MaskStrategy, dasm_forward
from .events import Event, Roster
from .frontend import InputError
from .model_config import EvalConfig, FrontendConfig
from .numerics.core_defs import Tensor, no_grad
from .postprocess import default_thresholds, detect
from .querybank import QueryStore, QueryVector, assemble_inference_queries
from .trainer import trim_frames

logger = logging.getLogger(__name__)

DETECTIONS_VERSION = "1.0"

ProgressFn = Callable[[Dict[str, Any]], None]


@dataclass
class QuerySet:
    class_ids: List[str]
    matrix: Optional[np.ndarray]
    n_base: int

    @property
    def n_novel(self) -> int:
        return len(self.class_ids) - self.n_base


@dataclass
class ClipDetections:
    clip_id: str
    duration: float
    frame_scores: np.ndarray
    clip_scores: np.ndarray
    events: Dict[float, List[Event]] = field(default_factory=dict)


def thresholds_for(cfg: EvalConfig) -> List[float]:
    return list(cfg.thresholds) if cfg.thresholds else default_thresholds(cfg.n_thresholds)


def build_query_set(
    model: DASM,
    store: Optional[QueryStore],
    base_ids: Optional[Sequence[str]] = None,
    novel: Sequence[QueryVector] = (),
    modality: str = "audio",
    include_novel: bool = True,
) -> QuerySet:
    """
    Base queries (the classes the model was trained on) followed by novel
    ones. Without explicit ``novel`` vectors every store class outside the
    base set is appended with the requested modality.
    """
    if model.cfg.head == "linear":
        return QuerySet(list(model.class_ids), None, len(model.class_ids))
    if store is None:
        raise InputError("query-driven inference needs a query store")
    base = list(base_ids) if base_ids is not None else store.class_ids("base")
    if include_novel and not novel:
        extra = [c for c in store.class_ids() if c not in set(base)]
        novel = [store.query(c, modality if modality in store.entry(c).vectors else store.entry(c).available()[0]) for c in extra]  # type: ignore[arg-type]
    ids, matrix, n_base = assemble_inference_queries(store, list(novel) if include_novel else [], modality, base)  # type: ignore[arg-type]
    return QuerySet(ids, matrix, n_base)


def predict_clip(model: DASM, features: np.ndarray, queries: QuerySet, strategy: MaskStrategy | str) -> Tuple[np.ndarray, np.ndarray]:
    """(frame scores [T, N], clip scores [N]) without recording a graph."""
    with no_grad():
        if queries.matrix is None:
            pred = model(Tensor(features))
        else:
            pred = dasm_forward(model, Tensor(features), queries.matrix, strategy, queries.n_base)
    return np.asarray(pred.frame.data, np.float64), np.asarray(pred.clip.data, np.float64).reshape(-1)


def run_inference(
    model: DASM,
    split: Split,
    frontend_cfg: FrontendConfig,
    queries: QuerySet,
    strategy: MaskStrategy | str,
    thresholds: Sequence[float],
    median_window: int = 5,
    progress: Optional[ProgressFn] = None,
) -> Dict[str, ClipDetections]:
    out: Dict[str, ClipDetections] = {}
    frame_seconds = 1.0 / model.frames_per_second
    for i, clip_id in enumerate(split.clip_ids):
        values = trim_frames(split.features(clip_id, frontend_cfg).values, model.cfg.patch_time)
        frame, clip = predict_clip(model, values, queries, strategy)
        events = detect(frame, thresholds, frame_seconds, queries.class_ids, median_window)
        out[clip_id] = ClipDetections(clip_id, split.durations.get(clip_id, values.shape[0] * frontend_cfg.hop_seconds), frame, clip, events)
        if progress and (i + 1) % 25 == 0:
            progress({"type": "infer_progress", "done": i + 1, "total": len(split.clip_ids)})
    logger.info("inference over %d clips, %d queries (%d novel), strategy %s", len(out), len(queries.class_ids), queries.n_novel, strategy)
    return out


def per_threshold(detections: Mapping[str, ClipDetections]) -> Dict[float, Roster]:
    out: Dict[float, Roster] = {}
    for clip_id, det in detections.items():
        for t, events in det.events.items():
            out.setdefault(t, {})[clip_id] = list(events)
    return out


# ---------------------------------------------------------------------------
#  Persistence
# ---------------------------------------------------------------------------
def write_detections(
    path: Union[str, Path],
    detections: Mapping[str, ClipDetections],
    queries: QuerySet,
    mask_strategy: str,
    checkpoint_hash: str,
    thresholds: Sequence[float],
    scores_dir: Optional[Union[str, Path]] = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    clips = []
    for clip_id in sorted(detections):
        det = detections[clip_id]
        events = [
            {"class_id": ev.class_id, "onset": ev.onset, "offset": ev.offset, "score": ev.score, "threshold": t}
            for t in sorted(det.events)
            for ev in det.events[t]
        ]
        clips.append(
            {
                "clip_id": clip_id,
                "duration": det.duration,
                "events": events,
                "mask_strategy": mask_strategy,
                "checkpoint_hash": checkpoint_hash,
            }
        )
        if scores_dir is not None:
            target = Path(scores_dir)
            target.mkdir(parents=True, exist_ok=True)
            np.savez_compressed(target / f"{clip_id}.npz", frame=det.frame_scores, clip=det.clip_scores, class_ids=np.array(queries.class_ids))
    doc = {
        "schema": "dasm-detections",
        "version": DETECTIONS_VERSION,
        "mask_strategy": mask_strategy,
        "checkpoint_hash": checkpoint_hash,
        "thresholds": [float(t) for t in thresholds],
        "class_ids": queries.class_ids,
        "n_base": queries.n_base,
        "clips": clips,
    }
    path.write_text(json.dumps(doc, indent=1), encoding="utf-8")
    return path


def read_detections(path: Union[str, Path]) -> Tuple[Dict[float, Roster], Dict[str, Any]]:
    """Per-threshold rosters plus the file's metadata (durations under ``durations``)."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: not a detections file ({e})") from e
    version = str(doc.get("version", "0"))
    if version.split(".")[0] != DETECTIONS_VERSION.split(".")[0]:
        raise InputError(f"{path}: detections format {version} is not compatible with {DETECTIONS_VERSION}")
    thresholds = [float(t) for t in doc["thresholds"]]
    rosters: Dict[float, Roster] = {t: {} for t in thresholds}
    durations: Dict[str, float] = {}
    for clip in doc["clips"]:
        durations[clip["clip_id"]] = float(clip["duration"])
        for t in thresholds:
            rosters[t].setdefault(clip["clip_id"], [])
        for ev in clip["events"]:
            t = float(ev["threshold"])
            if t not in rosters:
                raise InputError(f"{path}: event at undeclared threshold {t}")
            rosters[t][clip["clip_id"]].append(Event(float(ev["onset"]), float(ev["offset"]), ev["class_id"], ev.get("score")))
    meta = {k: v for k, v in doc.items() if k != "clips"}
    meta["durations"] = durations
    return rosters, meta
