from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import StructuralError

logger = logging.getLogger(__name__)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def create(cls, params: dict[str, np.ndarray], lr: float = 1e-4) -> AdamState:
        return cls(
            lr=lr,
            m={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
            v={k: np.zeros(p.shape, dtype=np.float64) for k, p in params.items()},
        )


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Bias-corrected Adam; returns new parameter arrays and advances ``state`` in place."""
    for key, value in params.items():
        if key not in grads or np.shape(grads[key]) != value.shape:
            raise StructuralError(f"gradient for '{key}' missing or mis-shaped")
        if key not in state.m:
            state.m[key] = np.zeros(value.shape, dtype=np.float64)
            state.v[key] = np.zeros(value.shape, dtype=np.float64)
        elif state.m[key].shape != value.shape:
            raise StructuralError(f"moment shape {state.m[key].shape} does not match parameter '{key}' {value.shape}")

    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1**t
    correction2 = 1.0 - state.beta2**t
    updated: dict[str, np.ndarray] = {}
    for key, value in params.items():
        g = np.asarray(grads[key], dtype=np.float64)
        state.m[key] = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        state.v[key] = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        m_hat = state.m[key] / correction1
        v_hat = state.v[key] / correction2
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        updated[key] = (value.astype(np.float64) - step).astype(value.dtype)
    return updated


@dataclass
class PlateauSchedule:
    """
    Validation-loss bookkeeping: learning-rate cuts on plateaus and early stopping.

    ``reduce_after`` epochs without improvement multiply the rate by ``factor``;
    ``stop_after`` epochs without improvement end training. A ``reduce_after``
    of 0 disables rate cuts.
    """

    lr: float
    stop_after: int
    reduce_after: int = 0
    factor: float = 0.1
    min_delta: float = 0.0
    best: float = math.inf
    best_epoch: int = -1
    stale: int = 0
    _since_cut: int = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record an epoch's validation loss; True when it is a new best."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.stale = 0
            self._since_cut = 0
            return True
        self.stale += 1
        self._since_cut += 1
        if self.reduce_after and self._since_cut >= self.reduce_after:
            self.lr *= self.factor
            self._since_cut = 0
            logger.info("Validation loss flat for %s epochs, learning rate now %.3g", self.reduce_after, self.lr)
        return False

    @property
    def should_stop(self) -> bool:
        return self.stale >= self.stop_after
