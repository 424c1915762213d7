"""Estimation-error metrics over a test split.

Arrays are ``(sequences, T, n)`` with row ``t - 1`` holding step ``t``.
"""

import numpy as np

from ..errors import InputError


def _aligned(true_states, estimates):
    x = np.asarray(true_states, dtype=float)
    xh = np.asarray(estimates, dtype=float)
    if x.ndim != 3 or x.shape != xh.shape:
        raise InputError(f"states {x.shape} and estimates {xh.shape} must be equal 3-d shapes")
    if x.shape[0] == 0 or x.shape[1] == 0:
        raise InputError("need at least one sequence and one step")
    return x, xh


def error_curve(true_states, estimates) -> np.ndarray:
    """``Error(t)`` for ``t = 1..T``: squared error averaged over sequences and states."""
    x, xh = _aligned(true_states, estimates)
    return np.mean((x - xh) ** 2, axis=(0, 2))


def error_at_t(true_states, estimates, t: int) -> float:
    x, xh = _aligned(true_states, estimates)
    if not 1 <= t <= x.shape[1]:
        raise InputError(f"t must lie in [1, {x.shape[1]}], got {t}")
    return float(np.mean((x[:, t - 1] - xh[:, t - 1]) ** 2))


def rmse(true_states, estimates) -> float:
    x, xh = _aligned(true_states, estimates)
    return float(np.sqrt(np.mean((x - xh) ** 2)))
