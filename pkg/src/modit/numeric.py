"""Dense kernels with hand-written backward passes, plus a finite-difference checker.

Every forward op that participates in training has a matching ``*_backward``.
Arrays may carry arbitrary leading batch dimensions; the last one or two axes
are the ones named in each docstring.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, Tuple

import numpy as np

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32


class DegenerateMaskError(ValueError):
    """A softmax row or renormalization row has no mass left."""


class InstrumentationError(RuntimeError):
    pass


def set_precision(mode: str) -> None:
    global _dtype
    if mode not in _PRECISIONS:
        raise ValueError(f"precision must be one of {sorted(_PRECISIONS)}, got {mode!r}")
    _dtype = _PRECISIONS[mode]


def get_dtype():
    return _dtype


def precision_name() -> str:
    return "f64" if _dtype == np.float64 else "f32"


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    prev = precision_name()
    set_precision(mode)
    try:
        yield
    finally:
        set_precision(prev)


# ---------------------------------------------------------------- softmax

def softmax_rows(scores: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the last axis. ``-inf`` entries get exactly zero weight."""
    scores = np.asarray(scores)
    row_max = scores.max(axis=-1, keepdims=True)
    if np.isneginf(row_max).any():
        raise DegenerateMaskError("softmax row is fully masked (all -inf)")
    e = np.exp(scores - row_max)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    inner = (d_weights * weights).sum(axis=-1, keepdims=True)
    return weights * (d_weights - inner)


def renormalize_rows(weights: np.ndarray, mask: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Multiply by a nonnegative mask and rescale rows to sum to one.

    Returns the renormalized weights and the row sums (kept for backward).
    """
    masked = weights * mask
    sums = masked.sum(axis=-1, keepdims=True)
    if (sums <= 0).any():
        raise DegenerateMaskError("mask zeroed an entire attention row")
    return masked / sums, sums


def renormalize_backward(mask: np.ndarray, out: np.ndarray, sums: np.ndarray,
                         d_out: np.ndarray) -> np.ndarray:
    inner = (d_out * out).sum(axis=-1, keepdims=True)
    return mask * (d_out - inner) / sums


# ---------------------------------------------------------------- linear

def linear_forward(x: np.ndarray, W: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """``y = x @ W + b`` over the last axis of ``x``."""
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"inner dimensions disagree: x has {x.shape[-1]} columns, W has {W.shape[0]} rows")
    y = x @ W
    if b is not None:
        y = y + b
    return y


def linear_backward(dy: np.ndarray, x: np.ndarray, W: np.ndarray):
    """Return ``(dx, dW, db)``; parameter grads are summed over all leading axes."""
    dx = dy @ W.T
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, x2.T @ dy2, dy2.sum(axis=0)


# ---------------------------------------------------------------- layer norm

def layer_norm(x: np.ndarray, gain: np.ndarray, shift: np.ndarray, eps: float = 1e-5):
    """Normalize each row to zero mean and unit variance, then apply ``gain``/``shift``.

    Returns ``(y, cache)``.
    """
    if gain.shape[-1] != x.shape[-1] or shift.shape[-1] != x.shape[-1]:
        raise ValueError("gain/shift length must equal the row width")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gain + shift, (xhat, inv, gain)


def layer_norm_backward(dy: np.ndarray, cache):
    xhat, inv, gain = cache
    n = xhat.shape[-1]
    dy2 = dy.reshape(-1, n)
    dgain = (dy2 * xhat.reshape(-1, n)).sum(axis=0)
    dshift = dy2.sum(axis=0)
    dxhat = dy * gain
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgain, dshift


# ---------------------------------------------------------------- activations

def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def leaky_relu_backward(dy: np.ndarray, x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x > 0, dy, slope * dy)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: np.ndarray) -> np.ndarray:
    # tanh approximation
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x ** 3)))


def gelu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    u = _GELU_C * (x + 0.044715 * x ** 3)
    th = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)


def silu(x: np.ndarray) -> np.ndarray:
    return x / (1.0 + np.exp(-x))


def silu_backward(dy: np.ndarray, x: np.ndarray) -> np.ndarray:
    s = 1.0 / (1.0 + np.exp(-x))
    return dy * (s * (1.0 + x * (1.0 - s)))


# ---------------------------------------------------------------- gradient check

@dataclass
class GradCheckReport:
    max_relative_error: float
    worst_parameter_index: Tuple[str, Tuple[int, ...]] | None
    analytic: float
    numeric: float
    checked: int = 0

    @property
    def passed(self) -> bool:
        return self.max_relative_error < 1e-4


def relative_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


LossAndGrad = Callable[[Dict[str, np.ndarray]], Tuple[float, Dict[str, np.ndarray]]]


def gradient_check(loss_fn: LossAndGrad, params: Dict[str, np.ndarray], step: float = 1e-5,
                   names=None) -> GradCheckReport:
    """Compare analytic gradients against central differences, entry by entry.

    ``loss_fn(params)`` must return ``(loss, grads)`` with ``grads`` keyed like
    ``params``. Only the blocks in ``names`` are perturbed when it is given.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    loss0, grads = loss_fn(work)
    if not np.isfinite(loss0):
        raise InstrumentationError("loss is not finite at the base point")

    report = GradCheckReport(0.0, None, 0.0, 0.0)
    for name in (names if names is not None else sorted(work)):
        p = work[name]
        g = np.asarray(grads.get(name, np.zeros_like(p)))
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_fn(work)
            flat[i] = orig - step
            lm, _ = loss_fn(work)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise InstrumentationError(f"non-finite loss while perturbing {name}[{i}]")
            num = (lp - lm) / (2 * step)
            ana = float(g.reshape(-1)[i])
            err = relative_error(ana, num)
            report.checked += 1
            if report.worst_parameter_index is None or err > report.max_relative_error:
                report.max_relative_error = err
                report.worst_parameter_index = (name, tuple(int(j) for j in np.unravel_index(i, p.shape)))
                report.analytic = ana
                report.numeric = num
    return report
