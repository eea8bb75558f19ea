# src/events.py
"""
Event rosters: strong labels and detections share one representation.

A roster maps ``clip_id`` to a list of ``Event``. On disk it is a tab-separated
table with a version comment line::

    # dasm-roster 1.0
    clip_id	class_id	onset	offset[	score]
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

logger = logging.getLogger(__name__)

ROSTER_VERSION = "1.0"
_HEADER_PREFIX = "# dasm-roster"


class ValidationError(ValueError):
    """Inputs are well-formed but mutually inconsistent."""


@dataclass(frozen=True, order=True)
class Event:
    onset: float
    offset: float
    class_id: str
    score: Optional[float] = None

    def __post_init__(self) -> None:
        if not self.onset < self.offset:
            raise ValidationError(f"event {self.class_id}: onset {self.onset} must be < offset {self.offset}")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def with_class(self, class_id: str) -> "Event":
        return replace(self, class_id=class_id)


Roster = Dict[str, List[Event]]


def sort_roster(roster: Mapping[str, Iterable[Event]]) -> Roster:
    return {clip: sorted(events) for clip, events in sorted(roster.items())}


def roster_classes(roster: Mapping[str, Iterable[Event]]) -> set[str]:
    return {ev.class_id for events in roster.values() for ev in events}


def check_within_clip(roster: Mapping[str, Iterable[Event]], durations: Mapping[str, float], tol: float = 1e-6) -> None:
    for clip, events in roster.items():
        length = durations.get(clip)
        if length is None:
            raise ValidationError(f"clip {clip!r} has events but no known duration")
        for ev in events:
            if ev.onset < -tol or ev.offset > length + tol:
                raise ValidationError(f"clip {clip!r}: event {ev} lies outside [0, {length}]")


# ---------------------------------------------------------------------------
#  TSV persistence
# ---------------------------------------------------------------------------
def write_roster(path: Union[str, Path], roster: Mapping[str, Sequence[Event]], with_scores: bool = False) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = ["clip_id", "class_id", "onset", "offset"] + (["score"] if with_scores else [])
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"{_HEADER_PREFIX} {ROSTER_VERSION}\n")
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(columns)
        for clip, events in sort_roster(roster).items():
            for ev in events:
                row = [clip, ev.class_id, f"{ev.onset:.6f}", f"{ev.offset:.6f}"]
                if with_scores:
                    row.append("" if ev.score is None else f"{ev.score:.6f}")
                writer.writerow(row)


def read_roster(path: Union[str, Path], clips: Optional[Iterable[str]] = None) -> Roster:
    """
    Parse a roster file. ``clips`` pre-seeds clip ids that may have no events.
    Files of another major version are rejected.
    """
    path = Path(path)
    roster: Roster = {clip: [] for clip in clips or ()}
    with path.open("r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    body: List[str] = []
    for line in lines:
        if line.startswith(_HEADER_PREFIX):
            version = line[len(_HEADER_PREFIX):].strip()
            if version.split(".")[0] != ROSTER_VERSION.split(".")[0]:
                raise ValidationError(f"{path}: roster format {version} is not compatible with {ROSTER_VERSION}")
            continue
        if line.startswith("#") or not line.strip():
            continue
        body.append(line)
    reader = csv.reader(body, delimiter="\t")
    for lineno, row in enumerate(reader, start=1):
        if row[:2] == ["clip_id", "class_id"]:
            continue
        if len(row) < 4:
            raise ValidationError(f"{path}: row {lineno} has {len(row)} fields, expected at least 4: {row}")
        score = float(row[4]) if len(row) > 4 and row[4] != "" else None
        ev = Event(onset=float(row[2]), offset=float(row[3]), class_id=row[1], score=score)
        roster.setdefault(row[0], []).append(ev)
    logger.debug("read %d events over %d clips from %s", sum(map(len, roster.values())), len(roster), path)
    return sort_roster(roster)
