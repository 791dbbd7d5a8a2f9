"""Biased self/cross attention, revised temporal attention, and bias-injection masks.

Attention parameters are plain dicts with keys ``W_q b_q W_k W_v b_v W_o b_o``. There is
no key bias: softmax is invariant to it, so its gradient is identically zero.
Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` consumes
the cache and returns input gradients plus a dict of parameter gradients.
"""
from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Optional

import numpy as np

from . import numeric
from .numeric import DegenerateMaskError

ATTN_KEYS = ("W_q", "b_q", "W_k", "W_v", "b_v", "W_o", "b_o")
BIAS_TARGETS = frozenset({"self", "cross", "temporal"})
ORDERS = ("algorithm_literal", "prose_order")
MASK_MODES = ("multiplicative", "additive")


# ---------------------------------------------------------------- masks

@dataclass(frozen=True, eq=False)
class BiasMask:
    kind: str
    values: np.ndarray
    bandwidth_or_sigma: float

    @property
    def shape(self):
        return self.values.shape


def _aligned_rows(T_q: int, T_k: int) -> np.ndarray:
    """Query row aligned with each key column, rounding half up."""
    j = np.arange(T_k, dtype=np.float64)
    return np.floor(j * T_q / T_k + 0.5)


def build_diagonal_bias(T_q: int, T_k: int, bandwidth: int, floor_value: float = 0.0) -> BiasMask:
    if bandwidth < 0:
        raise ValueError("bandwidth must be >= 0")
    i = np.arange(T_q, dtype=np.float64)[:, None]
    centre = _aligned_rows(T_q, T_k)[None, :]
    values = np.where(np.abs(i - centre) <= bandwidth, 1.0, float(floor_value))
    if (values.max(axis=1) <= 0).any():
        raise DegenerateMaskError(
            f"diagonal mask {T_q}x{T_k} with bandwidth {bandwidth} leaves a query row empty")
    values.setflags(write=False)
    return BiasMask("diagonal", values, float(bandwidth))


def build_dispersed_bias(T_q: int, T_k: int, sigma: float) -> BiasMask:
    if sigma <= 0:
        raise ValueError("sigma must be > 0")
    i = np.arange(T_q, dtype=np.float64)[:, None]
    pos = np.arange(T_k, dtype=np.float64)[None, :] * T_q / T_k
    values = np.exp(-((i - pos) ** 2) / (2.0 * sigma * sigma))
    values.setflags(write=False)
    return BiasMask("dispersed", values, float(sigma))


@dataclass(frozen=True)
class PhaseConfig:
    """Bias-injection schedule.

    With ``algorithm_literal`` order, steps ``t < t_threshold`` use ``M_D + M_E``
    and the rest use ``M_E`` alone; ``prose_order`` swaps the two branches.
    """
    t_threshold: int = 500
    order: str = "algorithm_literal"
    bias_targets: FrozenSet[str] = field(default_factory=lambda: frozenset({"cross"}))
    bandwidth: int = 1
    sigma: float = 2.0
    mode: str = "multiplicative"
    enabled: bool = True

    def __post_init__(self):
        if self.t_threshold < 1:
            raise ValueError("t_threshold must be >= 1")
        if self.order not in ORDERS:
            raise ValueError(f"order must be one of {ORDERS}")
        if self.mode not in MASK_MODES:
            raise ValueError(f"mode must be one of {MASK_MODES}")
        object.__setattr__(self, "bias_targets", frozenset(self.bias_targets))
        unknown = self.bias_targets - BIAS_TARGETS
        if unknown:
            raise ValueError(f"unknown bias targets {sorted(unknown)}")

    def uses_diagonal(self, t: int) -> bool:
        late = t < self.t_threshold
        return late if self.order == "algorithm_literal" else not late


def phase_mask(t: int, cfg: PhaseConfig, M_D: BiasMask, M_E: BiasMask) -> np.ndarray:
    if M_D.shape != M_E.shape:
        raise ValueError("M_D and M_E shapes differ")
    if cfg.uses_diagonal(t):
        return M_D.values + M_E.values
    return M_E.values


def apply_phase_bias(weights: np.ndarray, t: int, cfg: PhaseConfig,
                     M_D: BiasMask, M_E: BiasMask) -> np.ndarray:
    """Modulate row-stochastic attention weights by the phase mask and renormalize."""
    mask = phase_mask(t, cfg, M_D, M_E)
    if weights.shape[-2:] != mask.shape:
        raise ValueError(f"weights {weights.shape} incompatible with mask {mask.shape}")
    out, _ = numeric.renormalize_rows(weights, mask)
    return out


@functools.lru_cache(maxsize=256)
def _mask_pair(T_q: int, T_k: int, bandwidth: int, sigma: float):
    return build_diagonal_bias(T_q, T_k, bandwidth), build_dispersed_bias(T_q, T_k, sigma)


def layer_mask(target: str, t: int, cfg: Optional[PhaseConfig], T: int,
               T_prefix: int = 0, prefix_aligned: bool = False) -> Optional[np.ndarray]:
    """Full key-width mask for one attention role at timestep ``t``.

    Keys are ``[prefix; frames]``. A frame-aligned prefix (the audio latents in
    cross attention) gets its own phase mask; any other prefix column is 1.
    """
    if cfg is None or not cfg.enabled or target not in cfg.bias_targets:
        return None
    frames = phase_mask(t, cfg, *_mask_pair(T, T, cfg.bandwidth, cfg.sigma))
    if T_prefix == 0:
        return frames
    if prefix_aligned:
        prefix = phase_mask(t, cfg, *_mask_pair(T, T_prefix, cfg.bandwidth, cfg.sigma))
    else:
        prefix = np.ones((T, T_prefix))
    return np.concatenate([prefix, frames], axis=1)


# ---------------------------------------------------------------- core attention

def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    *lead, T, C = x.shape
    return x.reshape(*lead, T, heads, C // heads).swapaxes(-3, -2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    *lead, H, T, dk = x.shape
    return x.swapaxes(-3, -2).reshape(*lead, T, H * dk)


def _head_axis(m: np.ndarray) -> np.ndarray:
    # (Tq, Tk) broadcasts as is; (B, Tq, Tk) needs an explicit head axis
    return m if m.ndim == 2 else np.expand_dims(m, -3)


def attention_forward(xq: np.ndarray, xkv: np.ndarray, p: Dict[str, np.ndarray], heads: int,
                      score_bias: Optional[np.ndarray] = None, mask: Optional[np.ndarray] = None,
                      mask_mode: str = "multiplicative"):
    C = xq.shape[-1]
    if xkv.shape[-1] != C or p["W_q"].shape[0] != C:
        raise ValueError(f"width mismatch: queries {C}, keys {xkv.shape[-1]}, W_q {p['W_q'].shape}")
    if C % heads:
        raise ValueError(f"{heads} heads do not divide width {C}")
    dk = C // heads
    scale = 1.0 / math.sqrt(dk)

    Q = numeric.linear_forward(xq, p["W_q"], p["b_q"])
    K = numeric.linear_forward(xkv, p["W_k"])
    V = numeric.linear_forward(xkv, p["W_v"], p["b_v"])
    Qh, Kh, Vh = _split_heads(Q, heads), _split_heads(K, heads), _split_heads(V, heads)

    S = (Qh @ Kh.swapaxes(-1, -2)) * scale
    if score_bias is not None:
        S = S + score_bias
    hmask = None if mask is None else _head_axis(np.asarray(mask, dtype=S.dtype))
    if hmask is not None and mask_mode == "additive":
        S = S + hmask
    A = numeric.softmax_rows(S)
    sums = None
    if hmask is not None and mask_mode == "multiplicative":
        Af, sums = numeric.renormalize_rows(A, hmask)
    else:
        Af = A
    O = _merge_heads(Af @ Vh)
    Y = numeric.linear_forward(O, p["W_o"], p["b_o"])
    cache = dict(xq=xq, xkv=xkv, p=p, heads=heads, scale=scale, Qh=Qh, Kh=Kh, Vh=Vh,
                 A=A, Af=Af, sums=sums, hmask=hmask, O=O, mask_mode=mask_mode,
                 bias_shape=None if score_bias is None else np.shape(score_bias))
    return Y, cache


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def attention_backward(dY: np.ndarray, cache):
    """Returns ``(dxq, dxkv, grads, d_score_bias)``."""
    p = cache["p"]
    grads = {}
    dO, grads["W_o"], grads["b_o"] = numeric.linear_backward(dY, cache["O"], p["W_o"])
    dOh = _split_heads(dO, cache["heads"])
    dAf = dOh @ cache["Vh"].swapaxes(-1, -2)
    dVh = cache["Af"].swapaxes(-1, -2) @ dOh
    if cache["sums"] is not None:
        dA = numeric.renormalize_backward(cache["hmask"], cache["Af"], cache["sums"], dAf)
    else:
        dA = dAf
    dS = numeric.softmax_backward(cache["A"], dA)
    d_bias = None if cache["bias_shape"] is None else _reduce_to(dS, cache["bias_shape"])
    dS = dS * cache["scale"]
    dQ = _merge_heads(dS @ cache["Kh"])
    dK = _merge_heads(dS.swapaxes(-1, -2) @ cache["Qh"])
    dV = _merge_heads(dVh)
    dxq, grads["W_q"], grads["b_q"] = numeric.linear_backward(dQ, cache["xq"], p["W_q"])
    dxk, grads["W_k"], _ = numeric.linear_backward(dK, cache["xkv"], p["W_k"])
    dxv, grads["W_v"], grads["b_v"] = numeric.linear_backward(dV, cache["xkv"], p["W_v"])
    return dxq, dxk + dxv, grads, d_bias


def attention_weights(cache) -> np.ndarray:
    """Final (post-mask) attention weights, shape ``(..., heads, T_q, T_k)``."""
    return cache["Af"]


# ---------------------------------------------------------------- roles

def biased_self_attention(X, beta0, p, heads, mask=None, mask_mode="multiplicative"):
    """Self attention whose keys/values are ``[beta0; X]``; pass ``beta0=None`` to drop the prefix."""
    kv = X if beta0 is None else np.concatenate([np.broadcast_to(beta0, X.shape[:-2] + beta0.shape[-2:]), X], axis=-2)
    return attention_forward(X, kv, p, heads, mask=mask, mask_mode=mask_mode)


def biased_self_attention_backward(dY, cache, has_beta0=True):
    dxq, dkv, grads, _ = attention_backward(dY, cache)
    if not has_beta0:
        return dxq + dkv, None, grads
    return dxq + dkv[..., 1:, :], dkv[..., :1, :], grads


def biased_cross_attention(H, audio, p, heads, mask=None, mask_mode="multiplicative"):
    """Cross attention over ``[audio; H]``; ``audio`` is already projected to model width."""
    kv = np.concatenate([audio, H], axis=-2)
    return attention_forward(H, kv, p, heads, mask=mask, mask_mode=mask_mode)


def biased_cross_attention_backward(dY, cache, T_audio):
    dxq, dkv, grads, _ = attention_backward(dY, cache)
    return dxq + dkv[..., T_audio:, :], dkv[..., :T_audio, :], grads


# ---------------------------------------------------------------- revised temporal attention

LATENT_KEYS = ("z", "W_f1", "b_f1", "W_f2")  # an output bias would be a softmax no-op


def relative_bias(lat: Dict[str, np.ndarray], T: int):
    """Score offsets ``f(z[j - i])`` as a ``T x T`` matrix.

    ``lat["z"]`` holds one latent per relative offset, row ``k`` for offset
    ``k - (n_offsets - 1) // 2``.
    """
    z = lat["z"]
    centre = (z.shape[0] - 1) // 2
    if T - 1 > centre:
        raise ValueError(f"temporal latent table covers offsets up to {centre}, sequence needs {T - 1}")
    rows = np.arange(centre - (T - 1), centre + T)
    zs = z[rows]
    pre = zs @ lat["W_f1"] + lat["b_f1"]
    hid = numeric.leaky_relu(pre)
    f = (hid @ lat["W_f2"])[:, 0]
    idx = np.arange(T)[None, :] - np.arange(T)[:, None] + (T - 1)
    cache = dict(rows=rows, zs=zs, pre=pre, hid=hid, idx=idx, lat=lat)
    return f[idx], cache


def relative_bias_backward(dB: np.ndarray, cache):
    lat = cache["lat"]
    df = np.zeros(cache["rows"].size, dtype=dB.dtype)
    np.add.at(df, cache["idx"], dB)
    df = df[:, None]
    grads = {"W_f2": cache["hid"].T @ df}
    dhid = df @ lat["W_f2"].T
    dpre = numeric.leaky_relu_backward(dhid, cache["pre"])
    grads["W_f1"] = cache["zs"].T @ dpre
    grads["b_f1"] = dpre.sum(axis=0)
    dz = np.zeros_like(lat["z"])
    np.add.at(dz, cache["rows"], dpre @ lat["W_f1"].T)
    grads["z"] = dz
    return grads


def revised_temporal_attention(H, lat, p, heads, mask=None, mask_mode="multiplicative"):
    """Temporal self attention with ``f(z)`` added to the pre-softmax scores.

    ``lat=None`` gives plain temporal attention.
    """
    T = H.shape[-2]
    if lat is None:
        Y, cache = attention_forward(H, H, p, heads, mask=mask, mask_mode=mask_mode)
        cache["rel"] = None
        return Y, cache
    B, rcache = relative_bias(lat, T)
    Y, cache = attention_forward(H, H, p, heads, score_bias=B, mask=mask, mask_mode=mask_mode)
    cache["rel"] = rcache
    return Y, cache


def revised_temporal_attention_backward(dY, cache):
    dxq, dkv, grads, dB = attention_backward(dY, cache)
    lat_grads = None
    if cache["rel"] is not None:
        lat_grads = relative_bias_backward(dB, cache["rel"])
    return dxq + dkv, grads, lat_grads
