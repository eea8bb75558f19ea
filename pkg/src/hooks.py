"""
Training hooks: metrics log, console progress and run-state bookkeeping.

The trainer calls ``on_train_start`` once, ``on_step_end`` after every
optimizer step and ``on_train_end`` when the run finishes. Subclasses chain
to ``super()`` so several concerns stack in one object.
"""

from __future__ import annotations

import json
import logging
import math
from pathlib import Path
from typing import Any, Callable, Dict, Optional, TextIO

from .context import RunContext, dumps

logger = logging.getLogger(__name__)

Printer = Callable[[Dict[str, Any]], None]


class TrainingHooks:
    """No-op base; keeps a handle to the run context."""

    def __init__(self, ctx: Optional[RunContext] = None) -> None:
        self.ctx = ctx

    def on_train_start(self, info: Dict[str, Any]) -> None:
        if self.ctx is not None:
            self.ctx.state["train"] = dict(info)

    def on_phase(self, step: int, phase: str) -> None:
        if self.ctx is not None:
            self.ctx.record_event("phase", step=step, phase=phase)

    def on_step_end(self, step: int, metrics: Dict[str, float]) -> None:
        if self.ctx is not None:
            self.ctx.state["last_step"] = {"step": step, **metrics}

    def on_train_end(self, summary: Dict[str, Any]) -> None:
        if self.ctx is not None:
            self.ctx.record_event("train_end", **summary)
            self.ctx.dump_state_to_json()


class MetricsLogHooks(TrainingHooks):
    """Appends one JSON line per step to ``metrics.jsonl``."""

    def __init__(self, path: Path, ctx: Optional[RunContext] = None) -> None:
        super().__init__(ctx)
        self.path = Path(path)
        self._fh: Optional[TextIO] = None
        self._last_step = -1

    def on_train_start(self, info: Dict[str, Any]) -> None:
        super().on_train_start(info)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = self.path.open("w", encoding="utf-8")

    def on_step_end(self, step: int, metrics: Dict[str, float]) -> None:
        super().on_step_end(step, metrics)
        if step <= self._last_step:
            logger.error("metrics step %d not after %d", step, self._last_step)
        self._last_step = step
        if self._fh is not None:
            self._fh.write(dumps({"step": step, **metrics}) + "\n")
            self._fh.flush()

    def on_train_end(self, summary: Dict[str, Any]) -> None:
        super().on_train_end(summary)
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class ConsoleHooks(MetricsLogHooks):
    """Adds a progress line every ``every`` steps through ``printer``."""

    def __init__(self, path: Path, printer: Printer, every: int = 10, ctx: Optional[RunContext] = None) -> None:
        super().__init__(path, ctx)
        self.printer = printer
        self.every = max(1, every)

    def on_train_start(self, info: Dict[str, Any]) -> None:
        super().on_train_start(info)
        self.printer({"type": "train_start", **info})

    def on_phase(self, step: int, phase: str) -> None:
        super().on_phase(step, phase)
        self.printer({"type": "phase", "step": step, "phase": phase})

    def on_step_end(self, step: int, metrics: Dict[str, float]) -> None:
        super().on_step_end(step, metrics)
        if step % self.every == 0 or not math.isfinite(metrics.get("loss", 0.0)):
            self.printer({"type": "train_step", "step": step, **metrics})

    def on_train_end(self, summary: Dict[str, Any]) -> None:
        super().on_train_end(summary)
        self.printer({"type": "train_end", **summary})


def read_metrics(path: Path) -> list[Dict[str, Any]]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
