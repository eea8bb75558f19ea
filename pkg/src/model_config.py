# src/model_config.py
"""
Run configuration schema.

Every command is driven by one ``RunConfig``: a YAML file validated by
pydantic (unknown keys are rejected), with command-line overrides applied on
top. Process-level settings (log file, log level, default output root) come
from the environment, normally populated from ``.env`` by the CLI.
"""

from __future__ import annotations

import logging
import os
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .constants import RESOLVED_CONFIG

logger = logging.getLogger(__name__)

DEFAULT_OUTPUT_ROOT = os.getenv("DASM_OUTPUT_ROOT", "runs")

QueryModality = Literal["text", "audio", "mixed"]
MaskStrategyName = Literal["train", "invisible", "visible"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class FrontendConfig(_Section):
    sample_rate: int = 16000
    win_length: int = Field(1024, gt=0)
    hop_length: int = Field(160, gt=0)
    mel_bins: int = Field(64, gt=0)
    fmin: float = 0.0
    fmax: Optional[float] = None
    log_floor: float = Field(1e-10, gt=0)
    pad_end: bool = True

    @property
    def hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    @model_validator(mode="after")
    def _check(self) -> "FrontendConfig":
        if self.hop_length > self.win_length:
            raise ValueError(f"hop_length {self.hop_length} exceeds win_length {self.win_length}")
        top = self.fmax if self.fmax is not None else self.sample_rate / 2
        if not 0 <= self.fmin < top <= self.sample_rate / 2:
            raise ValueError(f"mel range [{self.fmin}, {top}] invalid for sample rate {self.sample_rate}")
        return self


class ModelConfig(_Section):
    dim: int = Field(384, gt=0)
    heads: int = Field(12, gt=0)
    ffn_ratio: float = Field(1.0, gt=0)
    decoder_blocks: int = Field(2, ge=1)
    backbone_blocks: int = Field(2, ge=1)
    conformer_blocks: int = Field(2, ge=1)
    conformer_kernel: int = Field(7, ge=1)
    patch_time: int = Field(8, ge=1)
    patch_freq: Optional[int] = Field(None, ge=1)
    upsample_factor: int = Field(4, ge=1)
    cnn_channels: Tuple[int, ...] = (16, 32, 64, 128)
    cnn_freq_pool: Tuple[int, ...] = (2, 2, 2, 2)
    cnn_time_pool: Tuple[int, ...] = (2, 1, 1, 1)
    head: Literal["query", "linear"] = "query"
    event_decoder: bool = True
    context_network: bool = True
    clip_prior: bool = True
    key_positional: bool = True
    novel_self_only: bool = False
    init_seed: int = 0

    @property
    def time_pool_product(self) -> int:
        out = 1
        for p in self.cnn_time_pool:
            out *= p
        return out

    @model_validator(mode="after")
    def _check(self) -> "ModelConfig":
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        n = len(self.cnn_channels)
        if n == 0 or len(self.cnn_freq_pool) != n or len(self.cnn_time_pool) != n:
            raise ValueError("cnn_channels, cnn_freq_pool and cnn_time_pool must have the same non-zero length")
        if self.patch_time != self.upsample_factor * self.time_pool_product:
            raise ValueError(
                f"patch_time {self.patch_time} must equal upsample_factor {self.upsample_factor}"
                f" x CNN time pooling {self.time_pool_product}"
            )
        if self.conformer_kernel % 2 == 0:
            raise ValueError(f"conformer_kernel must be odd, got {self.conformer_kernel}")
        return self


class LossConfig(_Section):
    alpha: float = Field(0.5, ge=0)
    gamma_pos: float = Field(0.0, ge=0)
    gamma_neg: float = Field(2.0, ge=0)
    prob_margin: float = Field(0.05, ge=0, lt=1)


class AugmentConfig(_Section):
    mixup_prob: float = Field(0.5, ge=0, le=1)
    mixup_alpha: float = Field(0.2, gt=0)
    time_shift: bool = True
    time_masks: int = Field(2, ge=0)
    time_mask_width: int = Field(20, ge=0)
    freq_masks: int = Field(2, ge=0)
    freq_mask_width: int = Field(8, ge=0)


class TrainConfig(_Section):
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(16, ge=1)
    lr: float = Field(1e-3, ge=0)
    lr_backbone: float = Field(1e-3 / 13, ge=0)
    weight_decay: float = Field(1e-2, ge=0)
    freeze_steps: int = Field(1000, ge=0)
    protocol: Literal["partial", "full"] = "partial"
    query_modality: QueryModality = "mixed"
    rare_threshold_seconds: float = Field(360.0, ge=0)
    resample: Literal["max_inverse_frequency", "uniform"] = "max_inverse_frequency"
    augment: AugmentConfig = AugmentConfig()
    log_every: int = Field(10, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.freeze_steps > self.steps:
            raise ValueError(f"freeze_steps {self.freeze_steps} exceeds steps {self.steps}")
        return self


class EvalConfig(_Section):
    mode: Literal["as", "desed"] = "as"
    dtc: float = Field(0.7, gt=0, le=1)
    gtc: float = Field(0.7, gt=0, le=1)
    cttc: float = Field(0.3, gt=0, le=1)
    alpha_ct: float = Field(0.0, ge=0)
    alpha_st: Optional[float] = Field(None, ge=0)
    e_max: float = Field(100.0, gt=0)
    n_thresholds: int = Field(50, ge=2)
    median_window: int = Field(5, ge=1)
    mask_strategy: MaskStrategyName = "visible"
    query_modality: Literal["text", "audio"] = "audio"
    thresholds: Optional[Tuple[float, ...]] = None

    @property
    def effective_alpha_st(self) -> float:
        if self.alpha_st is not None:
            return self.alpha_st
        return 1.0 if self.mode == "desed" else 0.0

    @model_validator(mode="after")
    def _check(self) -> "EvalConfig":
        if self.median_window % 2 == 0:
            raise ValueError(f"median_window must be odd, got {self.median_window}")
        if self.thresholds is not None:
            if len(self.thresholds) < 2:
                raise ValueError("at least 2 operating thresholds are required")
            bad = [t for t in self.thresholds if not 0.0 < t < 1.0]
            if bad:
                raise ValueError(f"thresholds outside (0, 1): {bad}")
        return self


class DatasetConfig(_Section):
    n_train_clips: int = Field(2000, ge=0)
    n_eval_clips: int = Field(200, ge=0)
    n_query_clips: int = Field(100, ge=0)
    clip_seconds: float = Field(10.0, ge=2.0)
    n_leaf_classes: int = Field(12, ge=1)
    n_mid_classes: int = Field(4, ge=0)
    n_root_classes: int = Field(2, ge=1)
    events_per_clip: Tuple[int, int] = (1, 4)
    event_seconds: Tuple[float, float] = (0.5, 3.0)
    snr_db: Tuple[float, float] = (6.0, 20.0)
    noise_rms: float = Field(0.01, gt=0)
    class_skew: float = Field(1.2, ge=0)

    @model_validator(mode="after")
    def _check(self) -> "DatasetConfig":
        for name in ("events_per_clip", "event_seconds", "snr_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: lower bound {lo} exceeds upper bound {hi}")
        return self


class RunConfig(_Section):
    frontend: FrontendConfig = FrontendConfig()
    model: ModelConfig = ModelConfig()
    loss: LossConfig = LossConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()
    dataset: DatasetConfig = DatasetConfig()
    seed: int = 0
    output_dir: str = str(Path(DEFAULT_OUTPUT_ROOT) / "default")

    @model_validator(mode="after")
    def _check(self) -> "RunConfig":
        if self.frontend.mel_bins < _freq_pool_product(self.model):
            raise ValueError(
                f"mel_bins {self.frontend.mel_bins} too small for CNN frequency pooling {self.model.cnn_freq_pool}"
            )
        return self


def _freq_pool_product(model: ModelConfig) -> int:
    out = 1
    for p in model.cnn_freq_pool:
        out *= p
    return out


# ---------------------------------------------------------------------------
#  Loading / overriding / dumping
# ---------------------------------------------------------------------------
def _deep_merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, Mapping) and isinstance(merged.get(key), Mapping):
            merged[key] = _deep_merge(dict(merged[key]), value)
        else:
            merged[key] = value
    return merged


def load_run_config(path: Optional[Union[str, Path]] = None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    """Read ``path`` (YAML) if given, apply ``overrides`` (flags win), validate."""
    raw: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        loaded = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        if not isinstance(loaded, dict):
            raise ValueError(f"{path}: top level of a run config must be a mapping")
        raw = loaded
    if overrides:
        raw = _deep_merge(raw, overrides)
    cfg = RunConfig.model_validate(raw)
    logger.debug("run config resolved: %s", cfg.model_dump(mode="json"))
    return cfg


def dump_run_config(cfg: RunConfig, directory: Union[str, Path]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    target = directory / RESOLVED_CONFIG
    target.write_text(yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True), encoding="utf-8")
    return target


def override_tree(dotted: Mapping[str, Any]) -> Dict[str, Any]:
    """``{"train.steps": 5}`` -> ``{"train": {"steps": 5}}``; ``None`` values are skipped."""
    tree: Dict[str, Any] = {}
    for key, value in dotted.items():
        if value is None:
            continue
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree
