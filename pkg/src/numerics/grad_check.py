# src/numerics/grad_check.py
"""Finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from .core_defs import EvaluationError, Parameter, Tensor, default_dtype, no_grad

logger = logging.getLogger(__name__)


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise EvaluationError(f"grad_check objective must be scalar, got shape {out.shape}")
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise EvaluationError(f"grad_check objective is not finite: {value}")
    return value


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    h: float = 1e-3,
    *,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """
    Compare the analytic gradient of ``f()`` w.r.t. ``params`` against central
    differences and return the worst relative error
    ``|a - n| / max(|a|, |n|, floor)``.

    Parameters are evaluated in float64 for the duration of the check and
    restored afterwards. ``max_coords`` limits the check to a random sample of
    coordinates drawn with ``rng``.
    """
    originals = [p.data for p in params]
    try:
        with default_dtype(np.float64):
            for p in params:
                p.data = p.data.astype(np.float64)
                p.zero_grad()
            base = f()
            _scalar(base)
            base.backward()
            analytic = [p.grad.copy() for p in params]

            coords = [(i, j) for i, p in enumerate(params) for j in range(p.size)]
            if max_coords is not None and max_coords < len(coords):
                rng = rng or np.random.default_rng(0)
                picked = rng.choice(len(coords), size=max_coords, replace=False)
                coords = [coords[k] for k in sorted(picked)]

            worst = 0.0
            with no_grad():
                for i, j in coords:
                    flat = params[i].data.reshape(-1)
                    saved = flat[j]
                    flat[j] = saved + h
                    f_plus = _scalar(f())
                    flat[j] = saved - h
                    f_minus = _scalar(f())
                    flat[j] = saved
                    numeric = (f_plus - f_minus) / (2.0 * h)
                    a = float(analytic[i].reshape(-1)[j])
                    err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
                    if err > worst:
                        worst = err
                        logger.debug("grad_check worst so far: param %d coord %d analytic=%g numeric=%g", i, j, a, numeric)
            return worst
    finally:
        for p, data in zip(params, originals):
            p.data = data
            p.zero_grad()
