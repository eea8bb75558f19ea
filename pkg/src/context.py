"""
Shared runtime context handed to every command, the trainer and its hooks.

• Knows the run's output directory.
• Collects a bounded history of notable events (phase changes, checkpoints,
  warnings) and free-form state so a failed run can be inspected afterwards.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
#  Safe JSON encoder for numpy scalars/arrays and paths in the state dump
# ---------------------------------------------------------------------------
class _SafeEncoder(json.JSONEncoder):
    def default(self, obj):  # noqa: D401, N802
        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist() if obj.size <= 64 else f"<array shape={obj.shape} dtype={obj.dtype}>"
        if isinstance(obj, Path):
            return str(obj)
        try:
            return super().default(obj)
        except TypeError:
            return str(obj)


def dumps(obj: Any, **kwargs: Any) -> str:
    return json.dumps(obj, cls=_SafeEncoder, **kwargs)


# ---------------------------------------------------------------------------
#  Run context
# ---------------------------------------------------------------------------
class RunContext:
    """
    Aggregates run-time data shared by commands, trainer and hooks.
    The CLI creates one instance per command invocation.
    """

    def __init__(
        self,
        output_dir: Union[str, Path],
        *,
        state: Optional[Dict[str, Any]] = None,
        max_events: int = 500,
    ) -> None:
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.state: Dict[str, Any] = state or {}
        self.events: List[Dict[str, Any]] = []
        self.max_events = max_events

    def path(self, name: str) -> Path:
        return self.output_dir / name

    # ---------------------------------------------------------------------
    #  Event history
    # ---------------------------------------------------------------------
    def record_event(self, kind: str, **payload: Any) -> Dict[str, Any]:
        if len(self.events) >= self.max_events:
            self.events.pop(0)
        event = {"type": kind, **payload}
        self.events.append(event)
        return event

    # ---------------------------------------------------------------------
    #  Persist run state for debugging
    # ---------------------------------------------------------------------
    def dump_state_to_json(self, file_path: Optional[Union[str, Path]] = None) -> None:
        target = Path(file_path) if file_path is not None else self.path("state_dump.json")
        try:
            with open(target, "w", encoding="utf-8") as fp:
                json.dump({"state": self.state, "events": self.events}, fp, cls=_SafeEncoder, indent=2)
            logger.debug("State dumped to %s", target)
        except Exception as exc:
            logger.warning("Failed to dump state to %s: %s", target, exc)
