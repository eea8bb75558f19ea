# src/dataset_io.py
"""
On-disk synthetic dataset.

    <root>/manifest.json                 seed, class catalogue, split clip lists
    <root>/ontology.tsv                  child<TAB>parent pairs
    <root>/querystore.tsv                text and audio queries, base/novel roles
    <root>/<split>/audio/<clip>.wav      16-bit PCM mono
    <root>/<split>/strong.tsv            leaf labels
    <root>/<split>/strong_augmented.tsv  labels closed under the ontology
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .events import Event, Roster, read_roster, write_roster
from .frontend import InputError, MelSpectrogram, Waveform, log_mel, read_wav, write_wav
from .labels import Ontology, label_augment, read_ontology, split_common_rare, write_ontology
from .model_config import FrontendConfig, RunConfig
from .querybank import QueryStore, StubEmbeddingProvider, build_audio_query, build_text_query, event_segments
from .synth import SynthSpec, generate_synthetic_clip, validate_clip

logger = logging.getLogger(__name__)

DATASET_VERSION = "1.0"
SPLITS = ("train", "eval", "queries")

ProgressFn = Callable[[Dict[str, Any]], None]


@dataclass
class Split:
    name: str
    audio_dir: Path
    clip_ids: List[str]
    durations: Dict[str, float]
    roster: Roster
    _features: Dict[Tuple[str, FrontendConfig], MelSpectrogram] = field(default_factory=dict, repr=False)

    def audio_path(self, clip_id: str) -> Path:
        return self.audio_dir / f"{clip_id}.wav"

    def wave(self, clip_id: str, sample_rate: int = 16000) -> Waveform:
        return read_wav(self.audio_path(clip_id), sample_rate)

    def features(self, clip_id: str, cfg: FrontendConfig, cache: bool = False) -> MelSpectrogram:
        key = (clip_id, cfg)
        if key in self._features:
            return self._features[key]
        mel = log_mel(self.wave(clip_id, cfg.sample_rate), cfg)
        if cache:
            self._features[key] = mel
        return mel

    @property
    def total_seconds(self) -> float:
        return float(sum(self.durations.values()))


# ---------------------------------------------------------------------------
#  Writing
# ---------------------------------------------------------------------------
def _ensure_empty(root: Path, force: bool) -> None:
    if root.exists() and any(root.iterdir()) and not force:
        raise InputError(f"output directory {root} is not empty; pass --force to overwrite")
    root.mkdir(parents=True, exist_ok=True)


def write_dataset(root: Union[str, Path], cfg: RunConfig, force: bool = False, progress: Optional[ProgressFn] = None) -> Dict[str, Any]:
    """Generate every split, the ontology, the query store and the manifest."""
    root = Path(root)
    _ensure_empty(root, force)
    spec = SynthSpec.from_config(cfg.dataset, cfg.frontend.sample_rate)
    write_ontology(root / "ontology.tsv", spec.ontology)

    counts = {"train": cfg.dataset.n_train_clips, "eval": cfg.dataset.n_eval_clips, "queries": cfg.dataset.n_query_clips}
    manifest: Dict[str, Any] = {
        "schema": "dasm-dataset",
        "version": DATASET_VERSION,
        "seed": cfg.seed,
        "sample_rate": spec.sample_rate,
        "clip_seconds": spec.clip_seconds,
        "classes": {
            c.class_id: {"kind": c.kind, "freq": c.freq, "band": list(c.band()), "prob": spec.class_probs[c.class_id]}
            for c in spec.classes.values()
        },
        "names": {c: spec.ontology.name(c) for c in spec.ontology.classes},
        "splits": {},
        "band_check_failures": [],
        "dataset": cfg.dataset.model_dump(mode="json"),
    }
    rosters: Dict[str, Roster] = {}
    for split_index, split in enumerate(SPLITS):
        roster: Roster = {}
        clip_ids: List[str] = []
        for i in range(counts[split]):
            clip_id = f"{split}_{i:05d}"
            rng = np.random.default_rng([cfg.seed, split_index, i])
            wave, events = generate_synthetic_clip(spec, rng)
            failures = validate_clip(wave, events, spec)
            if failures:
                logger.warning("clip %s band check: %s", clip_id, "; ".join(failures))
                manifest["band_check_failures"].extend(f"{clip_id}: {f}" for f in failures)
            write_wav(root / split / "audio" / f"{clip_id}.wav", wave)
            roster[clip_id] = [Event(ev.onset, ev.offset, ev.class_id) for ev in events]
            clip_ids.append(clip_id)
            if progress and (i + 1) % 100 == 0:
                progress({"type": "gen_progress", "split": split, "done": i + 1, "total": counts[split]})
        write_roster(root / split / "strong.tsv", roster)
        augmented, _ = label_augment(roster, spec.ontology)
        write_roster(root / split / "strong_augmented.tsv", augmented)
        rosters[split] = augmented
        manifest["splits"][split] = {"count": len(clip_ids), "clips": clip_ids}
        logger.info("split %s: %d clips written", split, len(clip_ids))

    store = build_store(cfg, spec.ontology, rosters["train"], root / "queries", rosters["queries"], clip_ids=manifest["splits"]["queries"]["clips"])
    store.save(root / "querystore.tsv")
    manifest["base_classes"] = store.class_ids("base")
    manifest["novel_classes"] = store.class_ids("novel")
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def build_store(
    cfg: RunConfig,
    ontology: Ontology,
    train_roster: Roster,
    query_root: Path,
    query_roster: Roster,
    clip_ids: Sequence[str],
) -> QueryStore:
    """
    Text queries for every class; audio queries pooled from event crops of the
    query split. Classes common in the training roster are base, the rest novel.
    """
    provider = StubEmbeddingProvider(cfg.model.dim, cfg.seed, cfg.frontend.mel_bins)
    common, _ = split_common_rare(train_roster, cfg.train.rare_threshold_seconds)
    store = QueryStore(cfg.model.dim, provider.header())
    spectra = {clip: log_mel(read_wav(query_root / "audio" / f"{clip}.wav", cfg.frontend.sample_rate), cfg.frontend) for clip in clip_ids}
    segments = event_segments(spectra, query_roster)
    for class_id in ontology.classes:
        role = "base" if class_id in common else "novel"
        store.add(build_text_query(ontology.name(class_id), provider, class_id, role), {"prompt": ontology.name(class_id)})
        segs = segments.get(class_id)
        if segs:
            sources = [f"{clip}:{ev.onset:.2f}-{ev.offset:.2f}" for clip in sorted(query_roster) for ev in query_roster[clip] if ev.class_id == class_id]
            store.add(build_audio_query(segs, provider, class_id, role), {"segments": sources})
        else:
            logger.warning("no query-split audio for class %s; text query only", class_id)
    return store


# ---------------------------------------------------------------------------
#  Reading
# ---------------------------------------------------------------------------
def load_manifest(root: Union[str, Path]) -> Dict[str, Any]:
    path = Path(root) / "manifest.json"
    if not path.is_file():
        raise InputError(f"no dataset manifest at {path}; run `gen` first")
    manifest = json.loads(path.read_text(encoding="utf-8"))
    if str(manifest.get("version", "0")).split(".")[0] != DATASET_VERSION.split(".")[0]:
        raise InputError(f"{path}: dataset format {manifest.get('version')} is not compatible with {DATASET_VERSION}")
    return manifest


def load_ontology(root: Union[str, Path], names: Optional[Mapping[str, str]] = None) -> Ontology:
    return read_ontology(Path(root) / "ontology.tsv", names)


def load_split(root: Union[str, Path], name: str, augmented: bool = True) -> Split:
    root = Path(root)
    manifest = load_manifest(root)
    if name not in manifest["splits"]:
        raise InputError(f"dataset {root} has no split {name!r}; available: {sorted(manifest['splits'])}")
    clip_ids = list(manifest["splits"][name]["clips"])
    roster_file = root / name / ("strong_augmented.tsv" if augmented else "strong.tsv")
    roster = read_roster(roster_file, clip_ids)
    durations = {clip: float(manifest["clip_seconds"]) for clip in clip_ids}
    return Split(name, root / name / "audio", clip_ids, durations, roster)


def load_audio_dir(audio_dir: Union[str, Path], sample_rate: int = 16000) -> Split:
    """Any directory of WAV files; clip ids are file stems and the roster is empty."""
    audio_dir = Path(audio_dir)
    if (audio_dir / "audio").is_dir():
        audio_dir = audio_dir / "audio"
    wavs = sorted(audio_dir.glob("*.wav"))
    if not wavs:
        raise InputError(f"no .wav files under {audio_dir}")
    durations = {w.stem: read_wav(w, sample_rate).seconds for w in wavs}
    return Split(audio_dir.name, audio_dir, [w.stem for w in wavs], durations, {w.stem: [] for w in wavs})
