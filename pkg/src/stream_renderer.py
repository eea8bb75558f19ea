"""
Console renderer for progress events.

`format_event(event) -> str | None`
-----------------------------------
Turns a single event dict emitted by generation, training, inference or
evaluation into a human-friendly one-liner:

• Dataset progress / completion   → «📂 …»
• Training start, phase, step     → «🏋️ …» / «🧊 …» / «📉 step …»
• Inference progress              → «🔎 …»
• Evaluation report / sweep row   → «📊 …»
• Errors                          → «❌ …»

Unknown events return ``None`` and are not shown.
"""

from __future__ import annotations

import math
from typing import Any, Mapping, Optional

# ─────────────────────────────────────────────────────────────────────────────
#  Helpers
# ─────────────────────────────────────────────────────────────────────────────
_GREEN, _YELLOW, _RED, _CYAN, _GREY, _RESET = "\033[92m", "\033[93m", "\033[91m", "\033[96m", "\033[90m", "\033[0m"


def _score(value: Any) -> str:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return "n/a"
    return f"{float(value):.4f}"


# ─────────────────────────────────────────────────────────────────────────────
#  Public API
# ─────────────────────────────────────────────────────────────────────────────
def format_event(evd: Mapping[str, Any]) -> Optional[str]:  # noqa: D401
    """
    Convert *evd* to a printable string **without** trailing newline,
    using ANSI codes for basic coloring.
    """
    kind = evd.get("type") or evd.get("kind")

    # ── Dataset generation ─────────────────────────────────────────────────
    if kind == "gen_progress":
        return f"{_GREY}📂 {evd['split']}: {evd['done']}/{evd['total']} clips{_RESET}"
    if kind == "gen_done":
        counts = ", ".join(f"{k}={v}" for k, v in evd.get("counts", {}).items())
        return f"{_GREEN}📂 Dataset written to {evd.get('root')} ({counts}){_RESET}"

    # ── Training ───────────────────────────────────────────────────────────
    if kind == "train_start":
        return (
            f"{_CYAN}🏋️ Training {evd.get('steps')} steps × batch {evd.get('batch_size')}"
            f" on {evd.get('clips')} clips / {evd.get('classes')} classes"
            f" ({evd.get('parameters')} parameters, {evd.get('protocol')} labels){_RESET}"
        )
    if kind == "phase":
        icon = "🧊" if evd.get("phase") == "backbone_frozen" else "🔥"
        return f"{_YELLOW}{icon} step {evd.get('step')}: {evd.get('phase')}{_RESET}"
    if kind == "train_step":
        loss = evd.get("loss", float("nan"))
        color = _RED if not math.isfinite(loss) else ""
        return (
            f"{color}📉 step {evd['step']:>6}  loss {loss:.5f}"
            f"  frame {evd.get('frame_loss', float('nan')):.5f}  clip {evd.get('clip_loss', float('nan')):.5f}{_RESET}"
        )
    if kind == "train_end":
        final = evd.get("final_loss")
        final_s = f"{final:.5f}" if isinstance(final, (int, float)) else "n/a"
        where = f" → {evd['checkpoint']}" if evd.get("checkpoint") else ""
        return f"{_GREEN}✅ Training finished after {evd.get('steps')} steps (loss {final_s}){where}{_RESET}"

    # ── Inference ──────────────────────────────────────────────────────────
    if kind == "infer_progress":
        return f"{_GREY}🔎 {evd['done']}/{evd['total']} clips{_RESET}"
    if kind == "infer_done":
        return (
            f"{_GREEN}🔎 Detections for {evd.get('clips')} clips, {evd.get('queries')} queries"
            f" ({evd.get('novel')} novel, {evd.get('mask_strategy')}) → {evd.get('path')}{_RESET}"
        )

    # ── Evaluation ─────────────────────────────────────────────────────────
    if kind == "eval_report":
        return (
            f"{_GREEN}📊 PSDS {_score(evd.get('psds'))}"
            f"  PSDS_c {_score(evd.get('psds_c'))}  PSDS_r {_score(evd.get('psds_r'))}"
            f"  [{evd.get('mode', 'as')}]{_RESET}"
        )
    if kind == "sweep_row":
        return f"{_CYAN}📊 query audio {evd['duration_s']:>6.2f} s → PSDS_r {_score(evd.get('psds_r'))}{_RESET}"

    # ── Errors ─────────────────────────────────────────────────────────────
    if kind == "error":
        return f"{_RED}❌ {evd.get('message', 'error')}{_RESET}"

    return None
