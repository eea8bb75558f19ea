# src/synth.py
"""
Synthetic strongly labelled audio.

Each leaf class is a parametric sound (tone, linear chirp, amplitude-modulated
tone, or band-passed noise). Leaves hang under mid-level groups, groups under
roots, giving a three-level ontology. Leaf probabilities follow a Zipf-like
law so that some classes end up rare.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from .events import Event
from .frontend import Waveform
from .labels import Ontology
from .model_config import DatasetConfig

logger = logging.getLogger(__name__)

SoundKind = Literal["tone", "chirp", "am", "noise"]
_KINDS: Tuple[SoundKind, ...] = ("tone", "chirp", "am", "noise")
GRID_SECONDS = 0.01
FADE_SECONDS = 0.005


class SpecError(ValueError):
    """A generation request cannot be satisfied."""


@dataclass(frozen=True)
class SynthClass:
    class_id: str
    kind: SoundKind
    freq: float
    mod_rate: float = 8.0

    def band(self) -> Tuple[float, float]:
        """Frequency band (Hz) holding almost all of the class energy."""
        if self.kind == "chirp":
            return 0.9 * self.freq, 1.1 * self.freq * 1.5
        if self.kind == "noise":
            return self.freq / 1.4, self.freq * 1.4
        return 0.9 * self.freq, 1.1 * self.freq

    def render(self, n: int, sample_rate: int, rng: np.random.Generator) -> np.ndarray:
        """Unit-RMS waveform of ``n`` samples."""
        t = np.arange(n) / sample_rate
        if self.kind == "tone":
            x = np.sin(2 * np.pi * self.freq * t + rng.uniform(0, 2 * np.pi))
        elif self.kind == "chirp":
            x = signal.chirp(t, f0=self.freq, t1=max(t[-1], 1.0 / sample_rate), f1=1.5 * self.freq, method="linear")
        elif self.kind == "am":
            x = (1.0 + 0.9 * np.sin(2 * np.pi * self.mod_rate * t)) * np.sin(2 * np.pi * self.freq * t)
        else:
            lo, hi = self.freq / 1.2, self.freq * 1.2
            sos = signal.butter(4, [lo, hi], btype="bandpass", fs=sample_rate, output="sos")
            x = signal.sosfilt(sos, rng.standard_normal(n + 2048))[2048:]
        fade = min(int(FADE_SECONDS * sample_rate), n // 2)
        if fade:
            ramp = np.linspace(0.0, 1.0, fade, endpoint=False)
            x = x.copy()
            x[:fade] *= ramp
            x[n - fade :] *= ramp[::-1]
        rms = np.sqrt(np.mean(x * x))
        return x / rms if rms > 0 else x


@dataclass
class SynthSpec:
    classes: Dict[str, SynthClass]
    ontology: Ontology
    class_probs: Dict[str, float]
    clip_seconds: float = 10.0
    sample_rate: int = 16000
    events_per_clip: Tuple[int, int] = (1, 4)
    event_seconds: Tuple[float, float] = (0.5, 3.0)
    snr_db: Tuple[float, float] = (6.0, 20.0)
    noise_rms: float = 0.01

    @classmethod
    def from_config(cls, cfg: DatasetConfig, sample_rate: int = 16000) -> "SynthSpec":
        classes, ontology = build_catalog(cfg.n_leaf_classes, cfg.n_mid_classes, cfg.n_root_classes)
        ranks = np.arange(1, len(classes) + 1, dtype=np.float64)
        weights = ranks ** (-cfg.class_skew)
        probs = dict(zip(classes, weights / weights.sum()))
        return cls(
            classes=classes,
            ontology=ontology,
            class_probs=probs,
            clip_seconds=cfg.clip_seconds,
            sample_rate=sample_rate,
            events_per_clip=tuple(cfg.events_per_clip),
            event_seconds=tuple(cfg.event_seconds),
            snr_db=tuple(cfg.snr_db),
            noise_rms=cfg.noise_rms,
        )


def build_catalog(n_leaves: int, n_mids: int, n_roots: int) -> Tuple[Dict[str, SynthClass], Ontology]:
    """Leaf sounds spread log-uniformly over 300-5000 Hz plus a group/family hierarchy."""
    freqs = np.geomspace(300.0, 5000.0, n_leaves) if n_leaves > 1 else np.array([1000.0])
    classes: Dict[str, SynthClass] = {}
    for i, f in enumerate(freqs):
        kind = _KINDS[i % len(_KINDS)]
        class_id = f"{kind}_{int(round(f))}"
        classes[class_id] = SynthClass(class_id, kind, float(round(f)))
    roots = [f"family_{chr(ord('a') + i)}" for i in range(n_roots)]
    mids = [f"group_{chr(ord('a') + i)}" for i in range(n_mids)]
    pairs: List[Tuple[str, str]] = [(r, "") for r in roots]
    pairs += [(m, roots[i % n_roots]) for i, m in enumerate(mids)]
    parents = mids or roots
    # contiguous frequency ranges share a parent
    for i, class_id in enumerate(classes):
        pairs.append((class_id, parents[i * len(parents) // max(1, len(classes))]))
    return classes, Ontology.from_pairs(pairs)


def _on_grid(x: float) -> float:
    return round(round(x / GRID_SECONDS) * GRID_SECONDS, 6)


def generate_synthetic_clip(
    spec: SynthSpec,
    rng: np.random.Generator,
    n_events: Optional[int] = None,
    placements: Optional[Sequence[Tuple[str, float, float]]] = None,
) -> Tuple[Waveform, List[Event]]:
    """
    Noise floor plus events. ``placements`` fixes (class_id, onset, duration)
    triples; otherwise ``n_events`` (or a draw from the spec's range) events
    are placed at random on a 10 ms grid. Each returned event carries its
    SNR in dB as ``score``.
    """
    sr = spec.sample_rate
    n = int(round(spec.clip_seconds * sr))
    audio = rng.standard_normal(n) * spec.noise_rms

    if placements is None:
        lo, hi = spec.events_per_clip
        count = int(rng.integers(lo, hi + 1)) if n_events is None else n_events
        ids = list(spec.class_probs)
        probs = np.array([spec.class_probs[c] for c in ids])
        placements = []
        for _ in range(count):
            class_id = ids[int(rng.choice(len(ids), p=probs))]
            duration = _on_grid(rng.uniform(*spec.event_seconds))
            if duration > spec.clip_seconds:
                raise SpecError(f"event duration {duration} s exceeds clip length {spec.clip_seconds} s")
            last_step = int(np.floor((spec.clip_seconds - duration) / GRID_SECONDS + 1e-9))
            onset = _on_grid(int(rng.integers(0, last_step + 1)) * GRID_SECONDS)
            placements.append((class_id, onset, duration))

    events: List[Event] = []
    for class_id, onset, duration in placements:
        if class_id not in spec.classes:
            raise SpecError(f"unknown synthetic class {class_id!r}")
        if duration <= 0 or onset < 0 or onset + duration > spec.clip_seconds + 1e-9:
            raise SpecError(f"event {class_id} at {onset}+{duration} s does not fit a {spec.clip_seconds} s clip")
        start = int(round(onset * sr))
        stop = min(n, int(round((onset + duration) * sr)))
        snr = rng.uniform(*spec.snr_db)
        gain = spec.noise_rms * 10.0 ** (snr / 20.0)
        audio[start:stop] += gain * spec.classes[class_id].render(stop - start, sr, rng)
        events.append(Event(round(onset, 6), round(onset + duration, 6), class_id, score=snr))

    return Waveform(audio.astype(np.float32), sr), sorted(events)


def band_power(samples: np.ndarray, sample_rate: int, band: Tuple[float, float]) -> float:
    """Mean power of ``samples`` inside ``band`` (one-sided periodogram)."""
    spectrum = np.fft.rfft(samples.astype(np.float64))
    freqs = np.fft.rfftfreq(samples.size, 1.0 / sample_rate)
    sel = (freqs >= band[0]) & (freqs <= band[1])
    return float(2.0 * np.sum(np.abs(spectrum[sel]) ** 2) / samples.size**2)


def band_snr_db(wave: Waveform, event: Event, cls: SynthClass, noise_rms: float) -> float:
    """Band power over the event span relative to the total noise-floor power, in dB."""
    start = int(round(event.onset * wave.sample_rate))
    stop = int(round(event.offset * wave.sample_rate))
    power = band_power(wave.samples[start:stop], wave.sample_rate, cls.band())
    return 10.0 * np.log10(power / noise_rms**2)


def validate_clip(wave: Waveform, events: Sequence[Event], spec: SynthSpec, tolerance_db: float = 1.5) -> List[str]:
    """Events whose band energy falls short of their SNR; empty when the clip is sound."""
    failures = []
    for ev in events:
        target = ev.score if ev.score is not None else spec.snr_db[0]
        measured = band_snr_db(wave, ev, spec.classes[ev.class_id], spec.noise_rms)
        if measured < target - tolerance_db:
            failures.append(f"{ev.class_id}@{ev.onset:.2f}s: {measured:.1f} dB < {target:.1f} dB")
    return failures
