"""Central finite-difference checks for layers, networks and losses."""

from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .network import Network


def numeric_gradient(fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central differences of a scalar function; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"], op_flags=[["readwrite"]])
    for _ in it:
        idx = it.multi_index
        original = float(x[idx])
        x[idx] = original + h
        plus = fn(x)
        x[idx] = original - h
        minus = fn(x)
        x[idx] = original
        grad[idx] = (plus - minus) / (2.0 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Largest absolute difference relative to the larger of the two gradients' magnitudes."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.abs(a).max(initial=0.0)), float(np.abs(n).max(initial=0.0)), floor)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def check_gradients(
    net: Network,
    x: np.ndarray,
    weights: np.ndarray,
    *,
    h: float = 1e-3,
) -> dict[str, float]:
    """
    Compare analytic and numeric gradients of ``sum(weights * net(x))`` in train mode.

    Returns the relative error per parameter plus ``"input"``. The network
    should be built with ``dtype=np.float64``.
    """

    def loss() -> float:
        return float((net.forward(x, "train") * weights).sum())

    net.forward(x, "train")
    d_input = net.backward(weights)
    analytic = {k: v.copy() for k, v in net.gradients().items()}
    errors: dict[str, float] = {}
    for key, param in net.parameters().items():
        errors[key] = relative_error(analytic[key], numeric_gradient(lambda _p: loss(), param, h))
    errors["input"] = relative_error(d_input, numeric_gradient(lambda _x: loss(), x, h))
    return errors
