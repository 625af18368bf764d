"""Central finite differences, used to verify analytic gradients."""

from __future__ import annotations

import numpy as np


def central_difference(f, x, h: float = 1e-6) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` by central differences."""
    x = np.asarray(x, dtype=float)
    grad = np.zeros_like(x)
    for i in range(x.size):
        step = np.zeros_like(x)
        step.flat[i] = h
        grad.flat[i] = (f(x + step) - f(x - step)) / (2.0 * h)
    return grad


def max_relative_error(analytic, numeric, floor: float = 1e-3) -> float:
    """Elementwise relative error with a floor on the denominator.

    Entries below the floor are in effect compared absolutely (at
    floor * tolerance), which keeps central-difference rounding noise at
    exact zeros from dominating the reported maximum.
    """
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))
