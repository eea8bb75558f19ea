# src/psds.py
"""
Polyphonic sound detection score.

Detections are matched to references with intersection criteria rather
than collars:

  * a detection is valid when its overlap with same-class references covers
    at least ``dtc`` of its own duration;
  * a reference is detected when valid detections cover at least ``gtc`` of it;
  * an invalid detection overlapping another class's references by at least
    ``cttc`` of its duration is a cross-trigger (only tracked when alpha_ct > 0).

Each operating threshold yields per-class (eFPR, TPR) points. Per-class ROC
curves are step functions over eFPR; their mean (minus alpha_st times the
spread across classes) is integrated over [0, e_max] and normalised.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .events import Event, Roster, ValidationError
from .frontend import InputError
from .model_config import EvalConfig
from .numerics.core_defs import ConfigurationError

logger = logging.getLogger(__name__)

# absolute slack (seconds) on intersection comparisons
MATCH_EPS = 1e-9

Span = Tuple[float, float]


@dataclass(frozen=True)
class PSDSConfig:
    dtc: float = 0.7
    gtc: float = 0.7
    cttc: float = 0.3
    alpha_ct: float = 0.0
    alpha_st: float = 0.0
    e_max: float = 100.0

    def __post_init__(self) -> None:
        for name in ("dtc", "gtc", "cttc"):
            value = getattr(self, name)
            if not 0.0 < value <= 1.0:
                raise ConfigurationError(f"{name} must lie in (0, 1], got {value}")
        if self.alpha_ct < 0 or self.alpha_st < 0 or self.e_max <= 0:
            raise ConfigurationError(f"invalid PSDS weights alpha_ct={self.alpha_ct} alpha_st={self.alpha_st} e_max={self.e_max}")

    @classmethod
    def from_eval(cls, cfg: EvalConfig) -> "PSDSConfig":
        return cls(cfg.dtc, cfg.gtc, cfg.cttc, cfg.alpha_ct, cfg.effective_alpha_st, cfg.e_max)


@dataclass
class ClassCounts:
    refs: int = 0
    tp: int = 0
    fp: int = 0
    cross: Dict[str, int] = field(default_factory=dict)


@dataclass
class OperatingPoint:
    threshold: float
    tpr: Dict[str, float]
    efpr: Dict[str, float]

    def summary(self) -> Dict[str, Any]:
        return {
            "type": "operating_point",
            "threshold": self.threshold,
            "mean_tpr": float(np.mean(list(self.tpr.values()))) if self.tpr else None,
            "mean_efpr": float(np.mean(list(self.efpr.values()))) if self.efpr else None,
            "tpr": self.tpr,
            "efpr": self.efpr,
        }


@dataclass
class PSDSResult:
    score: float
    classes: List[str]
    operating_points: List[OperatingPoint]
    curve: List[Tuple[float, float]]

    def roc_rows(self) -> List[Dict[str, Any]]:
        rows = [op.summary() for op in self.operating_points]
        rows.extend({"type": "curve", "efpr": x, "tpr": y} for x, y in self.curve)
        return rows


# ---------------------------------------------------------------------------
#  Interval helpers
# ---------------------------------------------------------------------------
def _union(spans: Iterable[Span]) -> List[Span]:
    out: List[Span] = []
    for a, b in sorted(spans):
        if out and a <= out[-1][1]:
            out[-1] = (out[-1][0], max(out[-1][1], b))
        else:
            out.append((a, b))
    return out


def _overlap(span: Span, union: Sequence[Span]) -> float:
    a, b = span
    return sum(max(0.0, min(b, d) - max(a, c)) for c, d in union)


def _by_class(events: Iterable[Event]) -> Dict[str, List[Span]]:
    out: Dict[str, List[Span]] = {}
    for ev in events:
        out.setdefault(ev.class_id, []).append((ev.onset, ev.offset))
    return out


# ---------------------------------------------------------------------------
#  Matching
# ---------------------------------------------------------------------------
def match_events(
    detections: Roster,
    references: Roster,
    dtc: float = 0.7,
    gtc: float = 0.7,
    cttc: Optional[float] = None,
    classes: Optional[Iterable[str]] = None,
) -> Dict[str, ClassCounts]:
    """
    Per-class counts for one operating point. ``cttc=None`` disables
    cross-trigger tracking so every invalid detection is a false positive.
    """
    known = set(classes) if classes is not None else None
    counts: Dict[str, ClassCounts] = {}

    def bucket(class_id: str) -> ClassCounts:
        return counts.setdefault(class_id, ClassCounts())

    for clip in sorted(set(detections) | set(references)):
        refs = {c: _union(s) for c, s in _by_class(references.get(clip, [])).items()}
        dets = _by_class(detections.get(clip, []))
        for class_id, spans in refs.items():
            bucket(class_id).refs += len(spans)
        for class_id in sorted(set(refs) | set(dets)):
            if known is not None and class_id not in known:
                continue
            same = refs.get(class_id, [])
            valid: List[Span] = []
            for span in dets.get(class_id, []):
                if _overlap(span, same) >= dtc * (span[1] - span[0]) - MATCH_EPS:
                    valid.append(span)
                    continue
                crossed = []
                if cttc is not None:
                    crossed = [
                        other
                        for other, union in refs.items()
                        if other != class_id
                        and (known is None or other in known)
                        and _overlap(span, union) >= cttc * (span[1] - span[0]) - MATCH_EPS
                    ]
                if crossed:
                    for other in crossed:
                        bucket(class_id).cross[other] = bucket(class_id).cross.get(other, 0) + 1
                else:
                    bucket(class_id).fp += 1
            covered = _union(valid)
            for ref in same:
                if _overlap(ref, covered) >= gtc * (ref[1] - ref[0]) - MATCH_EPS:
                    bucket(class_id).tp += 1
    return counts


def reference_seconds(references: Roster) -> Dict[str, float]:
    totals: Dict[str, float] = {}
    for events in references.values():
        for class_id, spans in _by_class(events).items():
            totals[class_id] = totals.get(class_id, 0.0) + sum(b - a for a, b in _union(spans))
    return totals


def check_class_ids(detections: Mapping[float, Roster], known: Iterable[str]) -> None:
    known = set(known)
    offenders = sorted({ev.class_id for roster in detections.values() for evs in roster.values() for ev in evs} - known)
    if offenders:
        raise ValidationError(f"detection classes missing from the reference class set: {offenders}")


# ---------------------------------------------------------------------------
#  Score
# ---------------------------------------------------------------------------
def operating_point(
    threshold: float,
    detections: Roster,
    references: Roster,
    duration_seconds: float,
    cfg: PSDSConfig,
    classes: Sequence[str],
    ref_seconds: Mapping[str, float],
) -> OperatingPoint:
    hours = duration_seconds / 3600.0
    counts = match_events(detections, references, cfg.dtc, cfg.gtc, cfg.cttc if cfg.alpha_ct > 0 else None, classes)
    tpr: Dict[str, float] = {}
    efpr: Dict[str, float] = {}
    for class_id in classes:
        c = counts.get(class_id, ClassCounts())
        tpr[class_id] = c.tp / c.refs if c.refs else 0.0
        rate = c.fp / hours
        if cfg.alpha_ct > 0:
            others = [o for o in classes if o != class_id and ref_seconds.get(o, 0.0) > 0]
            if others:
                ctr = [c.cross.get(o, 0) / (ref_seconds[o] / 3600.0) for o in others]
                rate += cfg.alpha_ct * float(np.mean(ctr))
        efpr[class_id] = rate
    return OperatingPoint(float(threshold), tpr, efpr)


def _class_curve(points: Sequence[OperatingPoint], class_id: str, x: float) -> float:
    best = 0.0
    for op in points:
        if op.efpr[class_id] <= x and op.tpr[class_id] > best:
            best = op.tpr[class_id]
    return best


def psds(
    per_threshold: Mapping[float, Roster],
    references: Roster,
    duration_seconds: float,
    cfg: PSDSConfig = PSDSConfig(),
    classes: Optional[Iterable[str]] = None,
) -> PSDSResult:
    """
    Score detections produced at several operating thresholds. ``classes``
    restricts the class set; by default every class with a reference is
    scored. An empty class set scores NaN.
    """
    if len(per_threshold) < 2:
        raise ConfigurationError(f"PSDS needs at least 2 operating points, got {len(per_threshold)}")
    if not duration_seconds > 0:
        raise InputError(f"dataset duration must be positive, got {duration_seconds}")
    ref_seconds = reference_seconds(references)
    if classes is None:
        class_set = sorted(c for c, s in ref_seconds.items() if s > 0)
    else:
        class_set = sorted(set(classes))
    if not class_set:
        logger.warning("PSDS requested on an empty class set")
        return PSDSResult(math.nan, [], [], [])

    points = [
        operating_point(t, per_threshold[t], references, duration_seconds, cfg, class_set, ref_seconds)
        for t in sorted(per_threshold)
    ]
    breaks = sorted({0.0} | {op.efpr[c] for op in points for c in class_set if op.efpr[c] < cfg.e_max})
    curve: List[Tuple[float, float]] = []
    area = 0.0
    for i, x in enumerate(breaks):
        values = np.array([_class_curve(points, c, x) for c in class_set])
        y = max(0.0, float(values.mean() - cfg.alpha_st * values.std()))
        right = breaks[i + 1] if i + 1 < len(breaks) else cfg.e_max
        area += y * (right - x)
        curve.append((float(x), y))
    score = area / cfg.e_max
    logger.debug("PSDS %.4f over %d classes, %d operating points", score, len(class_set), len(points))
    return PSDSResult(score, class_set, points, curve)


def psds_report(
    per_threshold: Mapping[float, Roster],
    references: Roster,
    duration_seconds: float,
    cfg: PSDSConfig,
    common: Iterable[str] = (),
    rare: Iterable[str] = (),
) -> Tuple[Dict[str, Any], PSDSResult]:
    """Overall score plus the common-class and rare-class scores; the full result carries the ROC."""
    scored = {c for c, s in reference_seconds(references).items() if s > 0}
    overall = psds(per_threshold, references, duration_seconds, cfg)
    common_set = sorted(set(common) & scored)
    rare_set = sorted(set(rare) & scored)
    report: Dict[str, Any] = {"psds": _finite(overall.score), "classes": overall.classes}
    report["psds_c"] = _finite(psds(per_threshold, references, duration_seconds, cfg, common_set).score) if common_set else None
    report["psds_r"] = _finite(psds(per_threshold, references, duration_seconds, cfg, rare_set).score) if rare_set else None
    report["common_classes"] = common_set
    report["rare_classes"] = rare_set
    return report, overall


def _finite(x: float) -> Optional[float]:
    return None if math.isnan(x) else float(x)
