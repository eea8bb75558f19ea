# src/trainer.py
"""
Optimisation loop.

Batches are drawn with per-clip resampling weights; each example is turned
into log-mel features and frame targets for the training classes, augmented,
and paired with per-class query vectors. Gradients are accumulated over the
batch and applied with AdamW in two parameter groups (backbone / rest). The
backbone group stays frozen for the first ``freeze_steps`` steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .dataset_io import Split
from .decoder import DASM, MaskStrategy, dasm_forward
from .events import Roster
from .frontend import InputError, augment_example
from .hooks import TrainingHooks
from .labels import frame_targets, resample_weights, split_common_rare, strip_classes
from .losses import total_loss
from .model_config import RunConfig
from .model_integration import save_model
from .numerics.core_defs import ConfigurationError, Tensor
from .numerics.optim import AdamW, ParamGroup
from .querybank import QueryStore, sample_modality

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Loss became NaN or infinite."""


@dataclass
class TrainingPlan:
    clip_ids: List[str]
    class_ids: List[str]
    roster: Roster
    weights: np.ndarray
    dropped_clips: List[str] = field(default_factory=list)
    rare_classes: List[str] = field(default_factory=list)


@dataclass
class TrainResult:
    steps: int
    losses: List[float]
    class_ids: List[str]
    checkpoint: Optional[Path] = None
    checkpoint_hash: Optional[str] = None


def trim_frames(values: np.ndarray, multiple: int) -> np.ndarray:
    """Drop trailing frames so the count is a multiple of ``multiple``."""
    usable = (values.shape[0] // multiple) * multiple
    if usable == 0:
        raise InputError(f"{values.shape[0]} feature frames; the model needs at least {multiple}")
    return values[:usable]


def plan_training(
    split: Split,
    cfg: RunConfig,
    store: Optional[QueryStore],
    class_ids: Optional[Sequence[str]] = None,
) -> TrainingPlan:
    """
    Decide the training classes and clips for the configured protocol.

    ``partial`` strips rare classes from the roster so only common classes are
    trained; ``full`` trains every labelled class. Clips left without labels
    are dropped.
    """
    roster = split.roster
    rare: List[str] = []
    if cfg.train.protocol == "partial":
        _, rare_set = split_common_rare(roster, cfg.train.rare_threshold_seconds)
        rare = sorted(rare_set)
        roster = strip_classes(roster, rare)
    labelled = sorted({ev.class_id for evs in roster.values() for ev in evs})
    if class_ids is None:
        class_ids = [c for c in labelled if store is None or c in store]
        missing = sorted(set(labelled) - set(class_ids))
        if missing:
            logger.warning("classes without a stored query are not trained: %s", missing)
    else:
        class_ids = list(class_ids)
    if not class_ids:
        raise ConfigurationError("no trainable classes: the roster has no labels for the selected protocol")

    keep = [c for c in split.clip_ids if any(ev.class_id in class_ids for ev in roster.get(c, []))]
    dropped = [c for c in split.clip_ids if c not in set(keep)]
    if dropped:
        logger.info("%d clips carry no training labels and are skipped", len(dropped))
    if not keep:
        raise ConfigurationError("no training clips carry labels for the training classes")
    roster = {c: [ev for ev in roster.get(c, []) if ev.class_id in class_ids] for c in keep}
    if cfg.train.resample == "uniform":
        weights = np.ones(len(keep))
    else:
        weights = resample_weights(roster, keep)
    return TrainingPlan(keep, list(class_ids), roster, weights, dropped, rare)


class Trainer:
    def __init__(
        self,
        model: DASM,
        cfg: RunConfig,
        store: Optional[QueryStore] = None,
        hooks: Optional[TrainingHooks] = None,
    ) -> None:
        self.model = model
        self.cfg = cfg
        self.store = store
        self.hooks = hooks or TrainingHooks()
        self.rng = np.random.default_rng(cfg.seed)
        tc = cfg.train
        self.optimizer = AdamW(
            [
                ParamGroup("backbone", model.backbone_parameters(), tc.lr_backbone, tc.weight_decay),
                ParamGroup("rest", model.head_parameters(), tc.lr, tc.weight_decay),
            ]
        )
        if model.cfg.head == "query" and store is None:
            raise ConfigurationError("query-driven training needs a query store")
        self._features: Dict[str, np.ndarray] = {}

    # -- data ----------------------------------------------------------------
    def _features_for(self, split: Split, clip_id: str, cache: bool) -> np.ndarray:
        values = self._features.get(clip_id)
        if values is None:
            mel = split.features(clip_id, self.cfg.frontend)
            values = trim_frames(mel.values, self.model.cfg.patch_time)
            if cache:
                self._features[clip_id] = values
        return values

    def example(self, split: Split, plan: TrainingPlan, clip_id: str, cache: bool = True) -> Tuple[np.ndarray, np.ndarray]:
        values = self._features_for(split, clip_id, cache)
        n_frames = values.shape[0] // self.model.cfg.time_pool_product
        targets = frame_targets(plan.roster.get(clip_id, []), plan.class_ids, n_frames, self.model.frames_per_second)
        return values, targets

    def queries(self, class_ids: Sequence[str]) -> Optional[np.ndarray]:
        if self.model.cfg.head == "linear":
            return None
        assert self.store is not None
        modalities = [
            sample_modality(c, self.rng, self.cfg.train.query_modality, self.store.entry(c).available()) for c in class_ids
        ]
        return self.store.matrix(class_ids, modalities)

    # -- loop ----------------------------------------------------------------
    def fit(
        self,
        split: Split,
        plan: Optional[TrainingPlan] = None,
        checkpoint: Optional[Union[str, Path]] = None,
        augment: bool = True,
        cache_limit: int = 512,
    ) -> TrainResult:
        plan = plan or plan_training(split, self.cfg, self.store, self.model.class_ids or None)
        tc = self.cfg.train
        probs = plan.weights / plan.weights.sum()
        cache = len(plan.clip_ids) <= cache_limit
        info = {
            "steps": tc.steps,
            "batch_size": tc.batch_size,
            "classes": len(plan.class_ids),
            "clips": len(plan.clip_ids),
            "parameters": self.model.num_parameters(),
            "protocol": tc.protocol,
        }
        logger.info("training: %s", info)
        self.hooks.on_train_start(info)

        losses: List[float] = []
        frozen: Optional[bool] = None
        for step in range(1, tc.steps + 1):
            want_frozen = step <= tc.freeze_steps
            if want_frozen != frozen:
                self.optimizer.set_frozen("backbone", want_frozen)
                self.hooks.on_phase(step, "backbone_frozen" if want_frozen else "backbone_trainable")
                frozen = want_frozen

            self.optimizer.zero_grad()
            totals = {"loss": 0.0, "frame_loss": 0.0, "clip_loss": 0.0}
            batch = self.rng.choice(len(plan.clip_ids), size=tc.batch_size, p=probs)
            for idx in batch:
                clip_id = plan.clip_ids[int(idx)]
                features, targets = self.example(split, plan, clip_id, cache)
                if augment:
                    partner = None
                    if tc.augment.mixup_prob > 0:
                        partner = self.example(split, plan, plan.clip_ids[int(self.rng.choice(len(plan.clip_ids), p=probs))], cache)
                    features, targets = augment_example(features, targets, tc.augment, self.rng, partner)
                queries = self.queries(plan.class_ids)
                pred = dasm_forward(self.model, Tensor(features), queries, MaskStrategy.TRAIN) if queries is not None else self.model(Tensor(features))
                loss, parts = total_loss(pred, targets, self.cfg.loss)
                if not math.isfinite(parts["loss"]):
                    last = f"{losses[-1]:.6f}" if losses else "none"
                    raise TrainingDivergedError(
                        f"loss became {parts['loss']} at step {step} on clip {clip_id}"
                        f" (frame {parts['frame_loss']}, clip {parts['clip_loss']}, previous step {last})"
                    )
                (loss * (1.0 / tc.batch_size)).backward()
                for key in totals:
                    totals[key] += parts[key] / tc.batch_size
            self.optimizer.step()

            losses.append(totals["loss"])
            self.hooks.on_step_end(step, {**totals, "backbone_frozen": bool(frozen)})

        result = TrainResult(tc.steps, losses, list(plan.class_ids))
        if checkpoint is not None:
            result.checkpoint = Path(checkpoint)
            result.checkpoint_hash = save_model(
                checkpoint,
                self.model,
                self.cfg.frontend,
                {"train_classes": plan.class_ids, "rare_classes": plan.rare_classes, "protocol": tc.protocol, "seed": self.cfg.seed},
            )
        self.hooks.on_train_end(
            {
                "steps": tc.steps,
                "final_loss": losses[-1] if losses else None,
                "checkpoint": str(result.checkpoint) if result.checkpoint else None,
            }
        )
        return result
