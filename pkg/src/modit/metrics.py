"""Sequence comparison metrics used by eval and the ablation harness."""
from __future__ import annotations

import numpy as np


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"sequence shapes differ: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def velocity_mse(a, b) -> float:
    """MSE between first temporal differences (axis 0 is time)."""
    a, b = _pair(a, b)
    if a.shape[0] < 2:
        raise ValueError("velocity needs at least two frames")
    return float(np.mean((np.diff(a, axis=0) - np.diff(b, axis=0)) ** 2))


def jitter(x) -> float:
    """Mean over interior frames of the squared norm of the second temporal difference."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.shape[0] < 3:
        raise ValueError("jitter needs at least three frames")
    acc = x[2:] - 2.0 * x[1:-1] + x[:-2]
    return float(np.mean(np.sum(acc * acc, axis=-1)))
