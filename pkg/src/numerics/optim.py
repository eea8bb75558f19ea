# src/numerics/optim.py
"""AdamW with decoupled weight decay and named parameter groups."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence

import numpy as np

from .core_defs import ConfigurationError, Parameter

logger = logging.getLogger(__name__)


@dataclass
class ParamGroup:
    name: str
    params: List[Parameter]
    lr: float
    weight_decay: float = 0.0
    frozen: bool = False


@dataclass
class _Slot:
    m: np.ndarray
    v: np.ndarray
    steps: int = 0


@dataclass
class AdamW:
    groups: Sequence[ParamGroup]
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    _state: Dict[int, _Slot] = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        seen: set[int] = set()
        for group in self.groups:
            if group.lr < 0 or group.weight_decay < 0:
                raise ConfigurationError(f"group {group.name}: lr={group.lr} weight_decay={group.weight_decay} must be >= 0")
            for p in group.params:
                if id(p) in seen:
                    raise ConfigurationError(f"parameter {p.name or id(p)} appears in more than one group")
                seen.add(id(p))

    def group(self, name: str) -> ParamGroup:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def set_frozen(self, name: str, frozen: bool) -> None:
        group = self.group(name)
        if group.frozen != frozen:
            logger.info("parameter group %s %s", name, "frozen" if frozen else "unfrozen")
        group.frozen = frozen

    def zero_grad(self) -> None:
        for group in self.groups:
            for p in group.params:
                p.zero_grad()

    def parameters(self) -> Iterable[Parameter]:
        for group in self.groups:
            yield from group.params

    def step(self) -> None:
        b1, b2 = self.betas
        for group in self.groups:
            if group.frozen:
                continue
            for p in group.params:
                slot = self._state.get(id(p))
                if slot is None:
                    slot = self._state[id(p)] = _Slot(np.zeros_like(p.data, np.float64), np.zeros_like(p.data, np.float64))
                g = p.grad.astype(np.float64)
                slot.steps += 1
                slot.m = b1 * slot.m + (1.0 - b1) * g
                slot.v = b2 * slot.v + (1.0 - b2) * g * g
                if group.lr == 0.0:
                    continue
                m_hat = slot.m / (1.0 - b1**slot.steps)
                v_hat = slot.v / (1.0 - b2**slot.steps)
                value = p.data.astype(np.float64) * (1.0 - group.lr * group.weight_decay)
                value = value - group.lr * m_hat / (np.sqrt(v_hat) + self.eps)
                p.data = value.astype(p.dtype)
