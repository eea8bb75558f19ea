# src/numerics/checkpoint.py
"""
Checkpoint archive.

Layout: an uncompressed ``.npz`` archive with one little-endian float32 array
per parameter name path, plus two reserved entries:

    __version__  format version string ("<major>.<minor>")
    __meta__     JSON document with the model configuration and run metadata
"""

from __future__ import annotations

import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "1.0"
_RESERVED = ("__version__", "__meta__")


class CompatibilityError(RuntimeError):
    """Stored artefact cannot be used with the requested model or store."""


def save_checkpoint(path: Union[str, Path], state: Mapping[str, np.ndarray], meta: Mapping[str, Any]) -> str:
    """Write ``state`` and ``meta``; returns the sha256 of the written file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays: Dict[str, np.ndarray] = {}
    for name, value in state.items():
        if name in _RESERVED:
            raise ValueError(f"parameter name {name!r} is reserved")
        arrays[name] = np.ascontiguousarray(value, dtype="<f4")
    arrays["__version__"] = np.array(CHECKPOINT_VERSION)
    arrays["__meta__"] = np.array(json.dumps(dict(meta), sort_keys=True))
    with path.open("wb") as fh:
        np.savez(fh, **arrays)
    digest = file_hash(path)
    logger.info("checkpoint written: %s (%d tensors, sha256 %s)", path, len(state), digest[:12])
    return digest


def load_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as archive:
        version = str(archive["__version__"]) if "__version__" in archive else "0.0"
        if version.split(".")[0] != CHECKPOINT_VERSION.split(".")[0]:
            raise CompatibilityError(f"checkpoint {path} has format {version}, expected major {CHECKPOINT_VERSION}")
        meta = json.loads(str(archive["__meta__"])) if "__meta__" in archive else {}
        state = {name: archive[name].copy() for name in archive.files if name not in _RESERVED}
    logger.debug("checkpoint loaded: %s (%d tensors)", path, len(state))
    return state, meta


def file_hash(path: Union[str, Path]) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
