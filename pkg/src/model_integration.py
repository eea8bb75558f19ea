# src/model_integration.py
"""Model factory plus checkpoint save/load bound to the run configuration."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple, Union

from .decoder import DASM
from .model_config import FrontendConfig, ModelConfig, RunConfig
from .numerics.checkpoint import CompatibilityError, load_checkpoint, save_checkpoint
from .querybank import QueryStore

logger = logging.getLogger(__name__)

ABLATIONS: Dict[str, Dict[str, Any]] = {
    "no-event-decoder": {"model": {"event_decoder": False}},
    "no-context": {"model": {"context_network": False}},
    "no-clip-loss": {"loss": {"alpha": 0.0}},
    "no-clip-prior": {"model": {"clip_prior": False}},
}


def create_model(model_cfg: ModelConfig, frontend_cfg: FrontendConfig, class_ids: Sequence[str] = ()) -> DASM:
    """Instantiate the detector for the given configuration."""
    logger.debug("Creating model: head=%s dim=%d heads=%d", model_cfg.head, model_cfg.dim, model_cfg.heads)
    try:
        model = DASM(model_cfg, frontend_cfg.mel_bins, frontend_cfg.hop_seconds, class_ids)
    except ValueError:
        raise
    except Exception as e:
        logger.critical(f"FATAL: Failed to create model: {e}", exc_info=True)
        raise RuntimeError("Could not create the detection model.") from e
    logger.info("Model created: %d parameters (%d in backbone)", model.num_parameters(), sum(p.size for p in model.backbone_parameters()))
    return model


def model_from_run(cfg: RunConfig, class_ids: Sequence[str] = ()) -> DASM:
    return create_model(cfg.model, cfg.frontend, class_ids)


def save_model(path: Union[str, Path], model: DASM, frontend_cfg: FrontendConfig, extra: Optional[Mapping[str, Any]] = None) -> str:
    meta = {
        "model": model.cfg.model_dump(mode="json"),
        "frontend": frontend_cfg.model_dump(mode="json"),
        "class_ids": list(model.class_ids),
        **(extra or {}),
    }
    return save_checkpoint(path, model.state_dict(), meta)


def load_model(path: Union[str, Path]) -> Tuple[DASM, Dict[str, Any]]:
    state, meta = load_checkpoint(path)
    try:
        model_cfg = ModelConfig.model_validate(meta["model"])
        frontend_cfg = FrontendConfig.model_validate(meta["frontend"])
    except KeyError as e:
        raise CompatibilityError(f"checkpoint {path} lacks configuration entry {e}") from e
    model = create_model(model_cfg, frontend_cfg, meta.get("class_ids", ()))
    model.load_state_dict(state)
    return model, meta


def check_store_compatible(model: DASM, store: QueryStore) -> None:
    if store.dim != model.cfg.dim:
        raise CompatibilityError(f"query store dim {store.dim} != model dim {model.cfg.dim}")
