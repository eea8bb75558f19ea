# src/frontend.py
"""
Audio frontend: WAV I/O, log-mel spectrograms and training-time augmentation.

• ``log_mel``      – periodic-Hann STFT power → HTK mel filterbank → ln(max(x, floor)).
• ``mixup``        – convex mix of two samples and their soft labels.
• ``time_shift``   – circular roll of features and frame labels together.
• ``spec_augment`` – rectangular time/frequency masks filled with the spectrogram mean.

With ``pad_end`` the signal is extended by ``win - hop`` zeros so a clip of
``n`` samples yields exactly ``n // hop`` frames.
"""

from __future__ import annotations

import functools
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Tuple, Union

import librosa
import numpy as np
import soundfile as sf

from .model_config import AugmentConfig, FrontendConfig

logger = logging.getLogger(__name__)

Span = Tuple[int, int]


class InputError(ValueError):
    """Caller-supplied data violates a precondition."""


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self) -> None:
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise InputError(f"waveform must be a non-empty mono signal, got shape {self.samples.shape}")

    @property
    def seconds(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [frames, mel_bins], float32
    hop_seconds: float

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def mel_bins(self) -> int:
        return self.values.shape[1]

    def crop(self, start_s: float, end_s: float) -> "MelSpectrogram":
        a = int(round(start_s / self.hop_seconds))
        b = max(a + 1, int(round(end_s / self.hop_seconds)))
        return MelSpectrogram(self.values[a:b], self.hop_seconds)


# ---------------------------------------------------------------------------
#  WAV I/O
# ---------------------------------------------------------------------------
def read_wav(path: Union[str, Path], expected_rate: int = 16000) -> Waveform:
    data, rate = sf.read(str(path), dtype="float32", always_2d=False)
    if data.ndim != 1:
        raise InputError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if rate != expected_rate:
        raise InputError(f"{path}: sample rate {rate} Hz, expected {expected_rate} Hz (no resampling)")
    return Waveform(data, rate)


def write_wav(path: Union[str, Path], wave: Waveform) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    sf.write(str(path), np.clip(wave.samples, -1.0, 1.0), wave.sample_rate, subtype="PCM_16")


# ---------------------------------------------------------------------------
#  Log-mel
# ---------------------------------------------------------------------------
@functools.lru_cache(maxsize=8)
def mel_filterbank(sample_rate: int, n_fft: int, mel_bins: int, fmin: float, fmax: float) -> np.ndarray:
    """[mel_bins, n_fft // 2 + 1] triangular HTK filters, peak 1."""
    return librosa.filters.mel(
        sr=sample_rate, n_fft=n_fft, n_mels=mel_bins, fmin=fmin, fmax=fmax, htk=True, norm=None
    ).astype(np.float64)


def _fmax(cfg: FrontendConfig) -> float:
    return cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2


def mel_band_centers(cfg: FrontendConfig) -> np.ndarray:
    """Centre frequency (Hz) of every mel band."""
    edges = librosa.mel_frequencies(n_mels=cfg.mel_bins + 2, fmin=cfg.fmin, fmax=_fmax(cfg), htk=True)
    return edges[1:-1]


def frame_count(n_samples: int, cfg: FrontendConfig) -> int:
    if n_samples < cfg.win_length:
        raise InputError(f"waveform of {n_samples} samples is shorter than the {cfg.win_length}-sample window")
    padded = n_samples + (cfg.win_length - cfg.hop_length if cfg.pad_end else 0)
    return (padded - cfg.win_length) // cfg.hop_length + 1


def power_spectrogram(samples: np.ndarray, cfg: FrontendConfig) -> np.ndarray:
    """[frames, win // 2 + 1] squared STFT magnitude."""
    n = frame_count(samples.size, cfg)
    x = samples.astype(np.float64)
    if cfg.pad_end:
        x = np.concatenate([x, np.zeros(cfg.win_length - cfg.hop_length)])
    spectrum = librosa.stft(
        x, n_fft=cfg.win_length, hop_length=cfg.hop_length, win_length=cfg.win_length, window="hann", center=False
    )
    return (np.abs(spectrum) ** 2).T[:n]


def log_mel(wave: Union[Waveform, np.ndarray], cfg: FrontendConfig) -> MelSpectrogram:
    if isinstance(wave, np.ndarray):
        wave = Waveform(wave, cfg.sample_rate)
    if wave.sample_rate != cfg.sample_rate:
        raise InputError(f"waveform rate {wave.sample_rate} Hz != frontend rate {cfg.sample_rate} Hz")
    fb = mel_filterbank(cfg.sample_rate, cfg.win_length, cfg.mel_bins, cfg.fmin, _fmax(cfg))
    mel = power_spectrogram(wave.samples, cfg) @ fb.T
    values = np.log(np.maximum(mel, cfg.log_floor)).astype(np.float32)
    return MelSpectrogram(values, cfg.hop_seconds)


# ---------------------------------------------------------------------------
#  Augmentation
# ---------------------------------------------------------------------------
def sample_mixup_lambda(rng: np.random.Generator, alpha: float = 0.2) -> float:
    return float(rng.beta(alpha, alpha))


def mixup(
    a: np.ndarray,
    b: np.ndarray,
    labels_a: np.ndarray,
    labels_b: np.ndarray,
    lam: float,
) -> Tuple[np.ndarray, np.ndarray]:
    if a.shape != b.shape or labels_a.shape != labels_b.shape:
        raise InputError(f"mixup operands disagree: {a.shape}/{b.shape}, labels {labels_a.shape}/{labels_b.shape}")
    if not 0.0 <= lam <= 1.0:
        raise InputError(f"mixup lambda {lam} outside [0, 1]")
    if lam == 1.0:
        return a.copy(), labels_a.copy()
    if lam == 0.0:
        return b.copy(), labels_b.copy()
    feats = (lam * a.astype(np.float64) + (1.0 - lam) * b.astype(np.float64)).astype(a.dtype)
    labels = (lam * labels_a.astype(np.float64) + (1.0 - lam) * labels_b.astype(np.float64)).astype(labels_a.dtype)
    return feats, labels


def time_shift(
    features: np.ndarray,
    labels: Optional[np.ndarray],
    shift: int,
    label_frames: Optional[int] = None,
) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Roll features and frame labels along time. ``shift`` counts label frames;
    features move by ``shift * frames_per_label_frame``. A shift of the full
    length is the identity.
    """
    t = labels.shape[0] if labels is not None else (label_frames or features.shape[0])
    if abs(shift) > t:
        raise InputError(f"time shift {shift} exceeds {t} frames")
    if features.shape[0] % t:
        raise InputError(f"{features.shape[0]} feature frames are not a multiple of {t} label frames")
    ratio = features.shape[0] // t
    shifted = np.roll(features, shift * ratio, axis=0)
    return shifted, (np.roll(labels, shift, axis=0) if labels is not None else None)


def apply_masks(values: np.ndarray, time_spans: Iterable[Span], freq_spans: Iterable[Span]) -> np.ndarray:
    """Set the given (start, width) time and frequency stripes to the spectrogram mean."""
    out = values.copy()
    fill = values.mean(dtype=np.float64).astype(values.dtype)
    frames, bins = values.shape
    for start, width in time_spans:
        start = min(max(0, start), frames)
        out[start : start + max(0, width)] = fill
    for start, width in freq_spans:
        start = min(max(0, start), bins)
        out[:, start : start + max(0, width)] = fill
    return out


def _draw_spans(rng: np.random.Generator, count: int, max_width: int, extent: int) -> list[Span]:
    max_width = min(max_width, extent)
    spans: list[Span] = []
    for _ in range(count):
        width = int(rng.integers(0, max_width + 1))
        start = int(rng.integers(0, extent - width + 1))
        spans.append((start, width))
    return spans


def spec_augment(
    values: np.ndarray,
    rng: np.random.Generator,
    time_masks: int = 2,
    time_width: int = 20,
    freq_masks: int = 2,
    freq_width: int = 8,
) -> np.ndarray:
    frames, bins = values.shape
    time_spans = _draw_spans(rng, time_masks, time_width, frames)
    freq_spans = _draw_spans(rng, freq_masks, freq_width, bins)
    return apply_masks(values, time_spans, freq_spans)


def augment_example(
    features: np.ndarray,
    frame_labels: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    partner: Optional[Tuple[np.ndarray, np.ndarray]] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Training-time chain: mixup (with ``partner``), time shift, SpecAugment."""
    if partner is not None and rng.random() < cfg.mixup_prob:
        lam = sample_mixup_lambda(rng, cfg.mixup_alpha)
        features, frame_labels = mixup(features, partner[0], frame_labels, partner[1], lam)
    if cfg.time_shift:
        t = frame_labels.shape[0]
        features, frame_labels = time_shift(features, frame_labels, int(rng.integers(-t + 1, t)))
    features = spec_augment(
        features, rng, cfg.time_masks, cfg.time_mask_width, cfg.freq_masks, cfg.freq_mask_width
    )
    return features, frame_labels
