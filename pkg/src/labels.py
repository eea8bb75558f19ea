# src/labels.py
"""
Label-side preprocessing: ontology closure, common/rare split, resampling
weights and frame-level target grids.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .events import Event, Roster, ValidationError, sort_roster

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
#  Ontology
# ---------------------------------------------------------------------------
@dataclass(frozen=True)
class Ontology:
    """Class hierarchy as a DAG; a class may have several parents."""

    parents: Mapping[str, FrozenSet[str]]
    names: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        unknown = sorted({p for ps in self.parents.values() for p in ps} - set(self.parents))
        if unknown:
            raise ValidationError(f"ontology parents without an entry: {unknown}")
        try:
            tuple(TopologicalSorter({c: set(ps) for c, ps in self.parents.items()}).static_order())
        except CycleError as e:
            raise ValidationError(f"ontology has a cycle through {e.args[1]}") from e

    @classmethod
    def from_pairs(cls, pairs: Iterable[Tuple[str, Optional[str]]], names: Optional[Mapping[str, str]] = None) -> "Ontology":
        parents: Dict[str, Set[str]] = {}
        for child, parent in pairs:
            parents.setdefault(child, set())
            if parent:
                parents[child].add(parent)
                parents.setdefault(parent, set())
        return cls({c: frozenset(ps) for c, ps in parents.items()}, dict(names or {}))

    @property
    def classes(self) -> List[str]:
        return sorted(self.parents)

    def __contains__(self, class_id: object) -> bool:
        return class_id in self.parents

    def name(self, class_id: str) -> str:
        return self.names.get(class_id, class_id.replace("_", " "))

    def roots(self) -> List[str]:
        return sorted(c for c, ps in self.parents.items() if not ps)

    def ancestors(self, class_id: str) -> FrozenSet[str]:
        cache: Dict[str, FrozenSet[str]] = self.__dict__.setdefault("_ancestor_cache", {})
        if class_id not in cache:
            seen: Set[str] = set()
            stack = list(self.parents[class_id])
            while stack:
                node = stack.pop()
                if node not in seen:
                    seen.add(node)
                    stack.extend(self.parents[node])
            cache[class_id] = frozenset(seen)
        return cache[class_id]

    def leaves(self) -> List[str]:
        has_child = {p for ps in self.parents.values() for p in ps}
        return sorted(c for c in self.parents if c not in has_child)

    def pairs(self) -> List[Tuple[str, str]]:
        out: List[Tuple[str, str]] = []
        for child in self.classes:
            ps = sorted(self.parents[child])
            if ps:
                out.extend((child, p) for p in ps)
            else:
                out.append((child, ""))
        return out


def write_ontology(path: Union[str, Path], ont: Ontology) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(["child", "parent"])
        writer.writerows(ont.pairs())


def read_ontology(path: Union[str, Path], names: Optional[Mapping[str, str]] = None) -> Ontology:
    with Path(path).open("r", encoding="utf-8") as fh:
        rows = [r for r in csv.reader(fh, delimiter="\t") if r and not r[0].startswith("#")]
    if rows and rows[0] == ["child", "parent"]:
        rows = rows[1:]
    return Ontology.from_pairs(((r[0], r[1] if len(r) > 1 else "") for r in rows), names)


# ---------------------------------------------------------------------------
#  Label augmentation
# ---------------------------------------------------------------------------
def merge_spans(events: Iterable[Event]) -> List[Event]:
    """Union of same-class spans; touching spans are joined."""
    by_class: Dict[str, List[Event]] = {}
    for ev in events:
        by_class.setdefault(ev.class_id, []).append(ev)
    merged: List[Event] = []
    for class_id, evs in by_class.items():
        evs.sort()
        onset, offset = evs[0].onset, evs[0].offset
        for ev in evs[1:]:
            if ev.onset <= offset:
                offset = max(offset, ev.offset)
            else:
                merged.append(Event(onset, offset, class_id))
                onset, offset = ev.onset, ev.offset
        merged.append(Event(onset, offset, class_id))
    return sorted(merged)


def label_augment(roster: Roster, ont: Ontology) -> Tuple[Roster, List[str]]:
    """
    Add an identically timed event for every ancestor of each labelled class
    and merge overlapping same-class spans. Clips carrying a class the
    ontology does not know are dropped; their ids are returned.
    """
    out: Roster = {}
    dropped: List[str] = []
    for clip, events in roster.items():
        unknown = sorted({ev.class_id for ev in events if ev.class_id not in ont})
        if unknown:
            logger.info("dropping clip %s: classes %s not in ontology", clip, unknown)
            dropped.append(clip)
            continue
        expanded = list(events)
        for ev in events:
            expanded.extend(ev.with_class(a) for a in ont.ancestors(ev.class_id))
        out[clip] = merge_spans(Event(e.onset, e.offset, e.class_id) for e in expanded)
    return sort_roster(out), dropped


# ---------------------------------------------------------------------------
#  Common / rare split
# ---------------------------------------------------------------------------
def class_durations(roster: Roster) -> Dict[str, float]:
    totals: Dict[str, float] = {}
    for events in roster.values():
        for ev in merge_spans(events):
            totals[ev.class_id] = totals.get(ev.class_id, 0.0) + ev.duration
    return totals


def split_common_rare(roster: Roster, threshold_seconds: float = 360.0) -> Tuple[Set[str], Set[str]]:
    """Classes with at least ``threshold_seconds`` of annotation are common, the rest rare."""
    common, rare = set(), set()
    for class_id, total in class_durations(roster).items():
        (common if total >= threshold_seconds - 1e-9 else rare).add(class_id)
    return common, rare


def strip_classes(roster: Roster, classes: Iterable[str]) -> Roster:
    removed = set(classes)
    return {clip: [ev for ev in events if ev.class_id not in removed] for clip, events in roster.items()}


# ---------------------------------------------------------------------------
#  Sampling weights
# ---------------------------------------------------------------------------
def resample_weights(roster: Roster, clip_ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Per-clip weight = max over its classes of 1 / (number of clips containing
    the class), rescaled to mean 1.
    """
    clip_ids = list(clip_ids) if clip_ids is not None else sorted(roster)
    if not clip_ids:
        return np.zeros(0)
    occurrences: Dict[str, int] = {}
    for clip in clip_ids:
        for class_id in {ev.class_id for ev in roster.get(clip, [])}:
            occurrences[class_id] = occurrences.get(class_id, 0) + 1
    raw = np.empty(len(clip_ids), dtype=np.float64)
    for i, clip in enumerate(clip_ids):
        classes = {ev.class_id for ev in roster.get(clip, [])}
        if not classes:
            raise ValidationError(f"clip {clip!r} has no labels; cannot derive a sampling weight")
        raw[i] = max(1.0 / occurrences[c] for c in classes)
    return raw * (len(raw) / raw.sum())


# ---------------------------------------------------------------------------
#  Frame targets
# ---------------------------------------------------------------------------
def frame_targets(events: Iterable[Event], class_ids: Sequence[str], n_frames: int, fps: float) -> np.ndarray:
    """[T, N] grid; frame t is positive when its centre (t + 0.5) / fps lies in [onset, offset)."""
    column = {c: i for i, c in enumerate(class_ids)}
    grid = np.zeros((n_frames, len(class_ids)), dtype=np.float32)
    centres = (np.arange(n_frames) + 0.5) / fps
    for ev in events:
        j = column.get(ev.class_id)
        if j is None:
            continue
        grid[(centres >= ev.onset) & (centres < ev.offset), j] = 1.0
    return grid
