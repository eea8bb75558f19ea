#!/usr/bin/env python
"""
Command-line interface for the open-vocabulary sound event detector.

    python -m src gen          synthesise a strongly labelled dataset + query store
    python -m src train        train a detector (partial / full labels, ablations)
    python -m src infer        detections for a directory of clips
    python -m src eval         PSDS report (overall / common / rare) + ROC table
    python -m src query-sweep  rare-class PSDS against audio-query duration
    python -m src selftest     run the bundled invariant suite

Every command reads a YAML run config (``--config``), applies flag overrides
(flags win) and writes the resolved config next to its outputs.
Exit codes: 0 success, 2 invalid input/configuration, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence

import numpy as np
import yaml

try:
    from dotenv import load_dotenv
    DOTENV_AVAILABLE = True
except ImportError:
    DOTENV_AVAILABLE = False

try:
    from rich.console import Console
    from rich.logging import RichHandler
    from rich.table import Table
    RICH_AVAILABLE = True
except ImportError:
    RICH_AVAILABLE = False

from . import cli_commands
from .cli_commands import Command, register
from .constants import (
    CHECKPOINT_FILE,
    CNN_PRESETS,
    DEFAULT_SWEEP_DURATIONS,
    DETECTIONS_FILE,
    EXIT_OK,
    EXIT_RUNTIME_ERROR,
    EXIT_VALIDATION_ERROR,
    METRICS_FILE,
    REPORT_FILE,
    ROC_FILE,
    ROC_PLOT,
    SCORES_DIR,
    SWEEP_PLOT,
    SWEEP_TABLE,
    TIMELINE_DIR,
)
from .context import RunContext, dumps

log_level_name = os.getenv("LOG_LEVEL", "INFO").upper()
log_level = getattr(logging, log_level_name, logging.INFO)
log_file = os.getenv("DASM_LOG_FILE", "dasm.log")

# Clear existing handlers to avoid duplication in repeated runs
for h in logging.root.handlers[:]:
    logging.root.removeHandler(h)

file_handler = logging.FileHandler(log_file, mode="a", encoding="utf-8")
file_handler.setLevel(log_level)
file_handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))

if RICH_AVAILABLE:
    console_handler: logging.Handler = RichHandler(console=Console(stderr=True), show_path=False, rich_tracebacks=False)
else:
    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(logging.Formatter("%(levelname)s: %(message)s"))
console_handler.setLevel(logging.WARNING)  # Only warnings+ to console by default

logging.basicConfig(level=min(log_level, logging.DEBUG), handlers=[file_handler, console_handler])
logger = logging.getLogger(__name__)


# ─────────────────────────────────────────────────────────────────────────────
#  Shared helpers
# ─────────────────────────────────────────────────────────────────────────────
def _emit(event: Mapping[str, Any]) -> None:
    from .stream_renderer import format_event

    line = format_event(dict(event))
    if line:
        print(line, flush=True)


def _float_list(text: str) -> List[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from e


def _parse_set(items: Optional[Sequence[str]]) -> Dict[str, Any]:
    dotted: Dict[str, Any] = {}
    for item in items or []:
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        dotted[key.strip()] = yaml.safe_load(raw)
    return dotted


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", type=Path, default=None, help="YAML run config.")
    parser.add_argument("--output-dir", "-o", default=None, help="Where outputs go (overrides output_dir).")
    parser.add_argument("--seed", type=int, default=None, help="Run seed (overrides seed).")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Override any config key, e.g. train.steps=50.")
    parser.add_argument("--verbose", "-v", action="store_true", help="Increase console log level to DEBUG.")


def _resolve_config(args: argparse.Namespace, extra: Optional[Mapping[str, Any]] = None):
    from .model_config import _deep_merge, load_run_config, override_tree

    overrides: Dict[str, Any] = {}
    for tree in (extra or {}, override_tree(_parse_set(args.set)), override_tree({"seed": args.seed, "output_dir": args.output_dir})):
        overrides = _deep_merge(overrides, tree)
    return load_run_config(args.config, overrides)


def _context(cfg, command: str) -> RunContext:
    from .model_config import dump_run_config

    ctx = RunContext(cfg.output_dir, state={"command": command, "seed": cfg.seed})
    dump_run_config(cfg, ctx.output_dir)
    return ctx


# ─────────────────────────────────────────────────────────────────────────────
#  gen
# ─────────────────────────────────────────────────────────────────────────────
def _configure_gen(p: argparse.ArgumentParser) -> None:
    p.add_argument("--force", action="store_true", help="Overwrite a non-empty output directory.")
    p.add_argument("--train-clips", type=int, default=None)
    p.add_argument("--eval-clips", type=int, default=None)
    p.add_argument("--query-clips", type=int, default=None)


def cmd_gen(args: argparse.Namespace) -> int:
    from .dataset_io import write_dataset
    from .model_config import dump_run_config, override_tree

    cfg = _resolve_config(
        args,
        override_tree(
            {
                "dataset.n_train_clips": args.train_clips,
                "dataset.n_eval_clips": args.eval_clips,
                "dataset.n_query_clips": args.query_clips,
            }
        ),
    )
    root = Path(cfg.output_dir)
    manifest = write_dataset(root, cfg, force=args.force, progress=_emit)
    dump_run_config(cfg, root)
    _emit({"type": "gen_done", "root": str(root), "counts": {k: v["count"] for k, v in manifest["splits"].items()}})
    if manifest["band_check_failures"]:
        logger.warning("%d events failed the band-energy check", len(manifest["band_check_failures"]))
    return EXIT_OK


# ─────────────────────────────────────────────────────────────────────────────
#  train
# ─────────────────────────────────────────────────────────────────────────────
def _configure_train(p: argparse.ArgumentParser) -> None:
    from .model_integration import ABLATIONS

    p.add_argument("--data", type=Path, required=True, help="Dataset root written by `gen`.")
    proto = p.add_mutually_exclusive_group()
    proto.add_argument("--partial", dest="protocol", action="store_const", const="partial", help="Train on common classes only.")
    proto.add_argument("--full", dest="protocol", action="store_const", const="full", help="Train on every labelled class.")
    p.add_argument("--closed-set", action="store_true", help="Linear classifier head over all classes (implies --full).")
    p.add_argument("--ablation", action="append", choices=sorted(ABLATIONS), default=[], help="Disable one component; repeatable.")
    p.add_argument("--query-modality", choices=["text", "audio", "mixed"], default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--cnn", choices=sorted(CNN_PRESETS), default=None, help="Fine-branch CNN preset.")


def _train_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    from .model_config import _deep_merge, override_tree
    from .model_integration import ABLATIONS

    tree: Dict[str, Any] = {}
    for name in args.ablation:
        tree = _deep_merge(tree, ABLATIONS[name])
    if args.cnn:
        tree = _deep_merge(tree, {"model": {k: list(v) for k, v in CNN_PRESETS[args.cnn].items()}})
    protocol = "full" if args.closed_set else args.protocol
    flat = {"train.protocol": protocol, "train.query_modality": args.query_modality, "train.steps": args.steps}
    if args.closed_set:
        flat["model.head"] = "linear"
    return _deep_merge(tree, override_tree(flat))


def cmd_train(args: argparse.Namespace) -> int:
    from .dataset_io import load_split
    from .hooks import ConsoleHooks
    from .model_integration import model_from_run
    from .numerics.checkpoint import file_hash
    from .querybank import QueryStore
    from .trainer import Trainer, plan_training

    cfg = _resolve_config(args, _train_overrides(args))
    ctx = _context(cfg, "train")
    store_path = args.data / "querystore.tsv"
    store = None
    if cfg.model.head == "query":
        if not store_path.is_file():
            raise FileNotFoundError(f"query store not found: {store_path}; run `gen` first")
        store = QueryStore.load(store_path)
    split = load_split(args.data, "train")
    plan = plan_training(split, cfg, store)
    if plan.rare_classes:
        ctx.record_event("rare_classes_removed", classes=plan.rare_classes)
    model = model_from_run(cfg, plan.class_ids if cfg.model.head == "linear" else ())
    hooks = ConsoleHooks(ctx.path(METRICS_FILE), _emit, cfg.train.log_every, ctx)
    result = Trainer(model, cfg, store, hooks).fit(split, plan, checkpoint=ctx.path(CHECKPOINT_FILE))
    ctx.state["checkpoint_hash"] = result.checkpoint_hash
    ctx.state["dataset"] = str(args.data)
    if store is not None:
        ctx.state["store_hash"] = file_hash(store_path)
    ctx.dump_state_to_json()
    return EXIT_OK


# ─────────────────────────────────────────────────────────────────────────────
#  infer
# ─────────────────────────────────────────────────────────────────────────────
def _configure_infer(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--store", type=Path, default=None, help="Query store (default: <data>/querystore.tsv).")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--data", type=Path, help="Dataset root; clips come from --split.")
    src.add_argument("--audio", type=Path, help="Any directory of WAV files.")
    p.add_argument("--split", default="eval")
    p.add_argument("--mask-strategy", choices=["visible", "invisible", "train"], default=None)
    p.add_argument("--query-modality", choices=["text", "audio"], default=None)
    p.add_argument("--thresholds", type=_float_list, default=None, help="Comma-separated operating thresholds.")
    p.add_argument("--base-only", action="store_true", help="Do not append novel queries.")
    p.add_argument("--dump-scores", action="store_true", help="Also write per-clip score matrices (.npz).")


def cmd_infer(args: argparse.Namespace) -> int:
    from .dataset_io import load_audio_dir, load_split
    from .inference import build_query_set, run_inference, thresholds_for, write_detections
    from .model_config import override_tree
    from .model_integration import check_store_compatible, load_model
    from .numerics.checkpoint import file_hash
    from .querybank import QueryStore

    cfg = _resolve_config(
        args,
        override_tree(
            {
                "eval.mask_strategy": args.mask_strategy,
                "eval.query_modality": args.query_modality,
                "eval.thresholds": args.thresholds,
            }
        ),
    )
    ctx = _context(cfg, "infer")
    model, meta = load_model(args.checkpoint)
    frontend_cfg = model_frontend(meta, cfg)
    store = None
    if model.cfg.head == "query":
        store_path = args.store or (args.data / "querystore.tsv" if args.data else None)
        if store_path is None or not store_path.is_file():
            raise FileNotFoundError(f"query store not found: {store_path}")
        store = QueryStore.load(store_path)
        check_store_compatible(model, store)
    split = load_split(args.data, args.split) if args.data else load_audio_dir(args.audio, frontend_cfg.sample_rate)
    queries = build_query_set(model, store, meta.get("train_classes"), modality=cfg.eval.query_modality, include_novel=not args.base_only)
    thresholds = thresholds_for(cfg.eval)
    detections = run_inference(model, split, frontend_cfg, queries, cfg.eval.mask_strategy, thresholds, cfg.eval.median_window, _emit)
    path = write_detections(
        ctx.path(DETECTIONS_FILE),
        detections,
        queries,
        cfg.eval.mask_strategy,
        file_hash(args.checkpoint),
        thresholds,
        ctx.path(SCORES_DIR) if args.dump_scores else None,
    )
    _emit(
        {
            "type": "infer_done",
            "clips": len(detections),
            "queries": len(queries.class_ids),
            "novel": queries.n_novel,
            "mask_strategy": cfg.eval.mask_strategy,
            "path": str(path),
        }
    )
    return EXIT_OK


def model_frontend(meta: Mapping[str, Any], cfg):
    from .model_config import FrontendConfig

    return FrontendConfig.model_validate(meta["frontend"]) if "frontend" in meta else cfg.frontend


# ─────────────────────────────────────────────────────────────────────────────
#  eval
# ─────────────────────────────────────────────────────────────────────────────
def _configure_eval(p: argparse.ArgumentParser) -> None:
    p.add_argument("--detections", type=Path, required=True)
    ref = p.add_mutually_exclusive_group(required=True)
    ref.add_argument("--references", type=Path, help="Reference roster (.tsv).")
    ref.add_argument("--data", type=Path, help="Dataset root; references from --split.")
    p.add_argument("--split", default="eval")
    p.add_argument("--mode", choices=["as", "desed"], default=None)
    p.add_argument("--subset", choices=["all", "common", "rare"], default="rare", help="Which score is reported as primary.")
    p.add_argument("--class-map", type=Path, default=None, help="TSV mapping detection class ids to reference class ids.")
    p.add_argument("--plots", action="store_true", help="Write ROC and timeline SVGs.")
    p.add_argument("--timelines", type=int, default=3, help="Number of clips to draw timelines for (with --plots).")


def _read_class_map(path: Path) -> Dict[str, str]:
    mapping: Dict[str, str] = {}
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValueError(f"{path}:{lineno}: expected 'detected<TAB>reference'")
        mapping[parts[0].strip()] = parts[1].strip()
    return mapping


def cmd_eval(args: argparse.Namespace) -> int:
    from .dataset_io import load_ontology, load_split
    from .events import Event, ValidationError, read_roster
    from .inference import read_detections
    from .model_config import override_tree
    from .psds import PSDSConfig, check_class_ids, psds, psds_report

    cfg = _resolve_config(args, override_tree({"eval.mode": args.mode}))
    ctx = _context(cfg, "eval")
    per_threshold, meta = read_detections(args.detections)
    if args.class_map:
        mapping = _read_class_map(args.class_map)
        per_threshold = {
            t: {clip: [Event(e.onset, e.offset, mapping.get(e.class_id, e.class_id), e.score) for e in evs] for clip, evs in roster.items()}
            for t, roster in per_threshold.items()
        }
        meta["class_ids"] = [mapping.get(c, c) for c in meta.get("class_ids", [])]

    if args.data:
        references = load_split(args.data, args.split).roster
        known = set(load_ontology(args.data).classes)
    else:
        references = read_roster(args.references)
        known = {ev.class_id for evs in references.values() for ev in evs} | set(meta.get("class_ids", []))
    check_class_ids(per_threshold, known)
    durations: Dict[str, float] = meta["durations"]
    missing = sorted(set(references) - set(durations))
    if missing:
        raise ValidationError(f"reference clips without detections: {missing[:10]}{' ...' if len(missing) > 10 else ''}")

    class_ids = list(meta.get("class_ids", []))
    n_base = int(meta.get("n_base", len(class_ids)))
    common, rare = class_ids[:n_base], class_ids[n_base:]
    psds_cfg = PSDSConfig.from_eval(cfg.eval)
    duration = float(sum(durations.values()))
    report, overall = psds_report(per_threshold, references, duration, psds_cfg, common, rare)
    report.update(
        {
            "primary": {"all": report["psds"], "common": report["psds_c"], "rare": report["psds_r"]}[args.subset],
            "subset": args.subset,
            "mode": cfg.eval.mode,
            "detections": str(args.detections),
            "mask_strategy": meta.get("mask_strategy"),
            "checkpoint_hash": meta.get("checkpoint_hash"),
            "psds_config": asdict(psds_cfg),
            "duration_seconds": duration,
        }
    )
    ctx.path(REPORT_FILE).write_text(dumps(report, indent=2), encoding="utf-8")
    with ctx.path(ROC_FILE).open("w", encoding="utf-8") as fh:
        for row in overall.roc_rows():
            fh.write(dumps(row) + "\n")
    _emit({"type": "eval_report", **report})
    _print_class_table(overall)

    if args.plots:
        from .plots import plot_roc, plot_timeline

        curves = {"all": overall}
        if report["common_classes"]:
            curves["common"] = psds(per_threshold, references, duration, psds_cfg, report["common_classes"])
        if report["rare_classes"]:
            curves["rare"] = psds(per_threshold, references, duration, psds_cfg, report["rare_classes"])
        plot_roc(curves, ctx.path(ROC_PLOT), psds_cfg.e_max)
        mid = min(per_threshold, key=lambda t: abs(t - 0.5))
        for clip in sorted(references)[: max(0, args.timelines)]:
            shown = sorted({e.class_id for e in references[clip]} | {e.class_id for e in per_threshold[mid].get(clip, [])})
            plot_timeline(clip, references[clip], per_threshold[mid].get(clip, []), shown, durations[clip], ctx.path(TIMELINE_DIR) / f"{clip}.svg", mid)
    return EXIT_OK


def _print_class_table(result) -> None:
    if not RICH_AVAILABLE or not result.operating_points:
        return
    table = Table(title="Per-class TPR at the operating point nearest 0.5")
    table.add_column("class")
    table.add_column("TPR", justify="right")
    table.add_column("eFPR/h", justify="right")
    op = min(result.operating_points, key=lambda p: abs(p.threshold - 0.5))
    for class_id in result.classes:
        table.add_row(class_id, f"{op.tpr[class_id]:.3f}", f"{op.efpr[class_id]:.1f}")
    Console().print(table)


# ─────────────────────────────────────────────────────────────────────────────
#  query-sweep
# ─────────────────────────────────────────────────────────────────────────────
def _configure_sweep(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="Dataset root (query split supplies the exemplar audio).")
    p.add_argument("--split", default="eval")
    p.add_argument("--durations", type=_float_list, default=list(DEFAULT_SWEEP_DURATIONS), help="Comma-separated seconds per class.")
    p.add_argument("--plots", action="store_true")


def cmd_query_sweep(args: argparse.Namespace) -> int:
    from .dataset_io import load_split
    from .inference import build_query_set, per_threshold, run_inference, thresholds_for
    from .model_integration import check_store_compatible, load_model
    from .psds import PSDSConfig, psds
    from .querybank import QueryStore, build_audio_query, event_segments, subsample_segments

    cfg = _resolve_config(args)
    ctx = _context(cfg, "query-sweep")
    model, meta = load_model(args.checkpoint)
    frontend_cfg = model_frontend(meta, cfg)
    store = QueryStore.load(args.data / "querystore.tsv")
    check_store_compatible(model, store)
    provider = store.provider()
    base_ids = list(meta.get("train_classes") or store.class_ids("base"))
    novel_ids = [c for c in store.class_ids() if c not in set(base_ids)]
    if not novel_ids:
        raise ValueError("query sweep needs novel classes; the checkpoint was trained on every store class")

    source = load_split(args.data, "queries")
    spectra = {clip: source.features(clip, frontend_cfg) for clip in source.clip_ids}
    segments = event_segments(spectra, source.roster, novel_ids)
    evaluation = load_split(args.data, args.split)
    scored = sorted({e.class_id for evs in evaluation.roster.values() for e in evs} & set(novel_ids))
    thresholds = thresholds_for(cfg.eval)
    psds_cfg = PSDSConfig.from_eval(cfg.eval)

    rows: List[Dict[str, Any]] = []
    for i, duration in enumerate(args.durations):
        rng = np.random.default_rng([cfg.seed, i])
        novel = []
        used = []
        for class_id in novel_ids:
            if class_id not in segments:
                logger.warning("class %s has no exemplar audio; falling back to its stored query", class_id)
                entry = store.entry(class_id)
                novel.append(store.query(class_id, entry.available()[-1]))
                continue
            picked, seconds = subsample_segments(segments[class_id], duration, rng)
            used.append(seconds)
            novel.append(build_audio_query(picked, provider, class_id, "novel"))
        queries = build_query_set(model, store, base_ids, novel)
        detections = run_inference(model, evaluation, frontend_cfg, queries, cfg.eval.mask_strategy, thresholds, cfg.eval.median_window)
        score = psds(per_threshold(detections), evaluation.roster, evaluation.total_seconds, psds_cfg, scored).score if scored else float("nan")
        row = {
            "duration_s": float(duration),
            "mean_used_s": float(np.mean(used)) if used else 0.0,
            "psds_r": None if np.isnan(score) else float(score),
            "n_novel": len(novel_ids),
        }
        rows.append(row)
        _emit({"type": "sweep_row", **row})

    with ctx.path(SWEEP_TABLE).open("w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row) + "\n")
    if args.plots:
        from .plots import plot_sweep

        plot_sweep(rows, ctx.path(SWEEP_PLOT))
    return EXIT_OK


# ─────────────────────────────────────────────────────────────────────────────
#  selftest
# ─────────────────────────────────────────────────────────────────────────────
def _configure_selftest(p: argparse.ArgumentParser) -> None:
    p.add_argument("--slow", action="store_true", help="Include the desk-scale experiments.")


def cmd_selftest(args: argparse.Namespace) -> int:
    import pytest

    tests = Path(__file__).resolve().parent.parent / "tests"
    if not tests.is_dir():
        raise FileNotFoundError(f"test suite not found at {tests}")
    marker = ["-m", ""] if args.slow else ["-m", "not slow"]
    code = pytest.main([str(tests), "-q", *marker])
    return EXIT_OK if code == 0 else EXIT_RUNTIME_ERROR


# ─────────────────────────────────────────────────────────────────────────────
#  Registry + entry point
# ─────────────────────────────────────────────────────────────────────────────
for _command in (
    Command("gen", "Synthesise a strongly labelled dataset and its query store.", cmd_gen, _configure_gen),
    Command("train", "Train a detector on a generated dataset.", cmd_train, _configure_train),
    Command("infer", "Write detections for a directory of clips.", cmd_infer, _configure_infer),
    Command("eval", "Score detections with PSDS (overall, common, rare).", cmd_eval, _configure_eval),
    Command("query-sweep", "Rare-class PSDS as a function of audio-query duration.", cmd_query_sweep, _configure_sweep),
    Command("selftest", "Run the bundled invariant test suite.", cmd_selftest, _configure_selftest),
):
    if cli_commands.get(_command.name) is None:
        register(_command)


def main(argv: Optional[Sequence[str]] = None) -> int:
    if DOTENV_AVAILABLE:
        if load_dotenv(override=False):
            logger.info(".env loaded.")

    parser = cli_commands.build_parser("dasm", "Open-vocabulary sound event detection.", _common_flags)
    args = parser.parse_args(argv)

    if args.verbose:
        console_handler.setLevel(logging.DEBUG)
        logger.info("Verbose console logging enabled.")
    else:
        console_handler.setLevel(logging.WARNING)

    logger.info("command %s: %s", args.command, {k: v for k, v in vars(args).items() if not k.startswith("_")})
    try:
        return args._handler(args)
    except ValueError as e:
        logger.error(f"{args.command}: invalid input: {e}", exc_info=True)
        _emit({"type": "error", "message": f"{args.command}: {e}"})
        return EXIT_VALIDATION_ERROR
    except Exception as e:
        logger.critical(f"FATAL: {args.command} failed: {e}", exc_info=True)
        _emit({"type": "error", "message": f"{args.command} failed: {e}"})
        return EXIT_RUNTIME_ERROR


if __name__ == "__main__":
    try:
        if sys.version_info < (3, 10):
            print("Python 3.10+ required.", file=sys.stderr)
            sys.exit(1)
        sys.exit(main())
    except KeyboardInterrupt:
        print("\n\033[93mExiting by Ctrl+C.\033[0m")
        sys.exit(1)
