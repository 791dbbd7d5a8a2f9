"""Conditional noise predictor over expression-coefficient sequences.

Layout of one block (pre-norm, every sublayer residual)::

    h += time embedding
    h += self_attn(LN(h), keys/values [beta0; LN(h)])
    h += cross_attn(LN(h), keys/values [audio; LN(h)])
    h += temporal_attn(LN(h), scores + f(z[j - i]))
    h += FFN(LN(h))

Parameters live in one flat ``{name: array}`` dict so that checkpoints,
optimizers and the gradient checker can treat them uniformly.
"""
from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, replace
from typing import Dict, Optional

import numpy as np

from . import attention as attn
from . import numeric
from .attention import PhaseConfig

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class DenoiserConfig:
    width: int = 1024
    ffn_width: int = 2048
    heads: int = 4
    blocks: int = 1
    frames: int = 12
    coeff_dim: int = 64
    audio_dim: int = 16
    latent_dim: int = 8
    f_hidden: int = 16
    use_beta0: bool = True
    temporal_revision: bool = True

    def __post_init__(self):
        for name in ("width", "ffn_width", "heads", "blocks", "frames", "coeff_dim",
                     "audio_dim", "latent_dim", "f_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide width ({self.width})")
        if self.width % 2:
            raise ValueError("width must be even for the sinusoidal time embedding")

    @classmethod
    def full_scale(cls, **kw) -> "DenoiserConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "DenoiserConfig":
        base = dict(width=64, ffn_width=128, heads=4, blocks=1, frames=12)
        base.update(kw)
        return cls(**base)

    def with_(self, **kw) -> "DenoiserConfig":
        return replace(self, **kw)


def param_shapes(cfg: DenoiserConfig) -> "OrderedDict[str, tuple]":
    W, F, D, A = cfg.width, cfg.ffn_width, cfg.coeff_dim, cfg.audio_dim
    shapes = OrderedDict()
    shapes["in.W"], shapes["in.b"] = (D, W), (W,)
    shapes["audio.W"], shapes["audio.b"] = (A, W), (W,)
    if cfg.use_beta0:
        shapes["beta0.W"], shapes["beta0.b"] = (D, W), (W,)
    shapes["time.W1"], shapes["time.b1"] = (W, W), (W,)
    shapes["time.W2"], shapes["time.b2"] = (W, W), (W,)
    for i in range(cfg.blocks):
        pre = f"blocks.{i}."
        for ln in ("ln1", "ln2", "ln3", "ln4"):
            shapes[pre + ln + ".g"], shapes[pre + ln + ".s"] = (W,), (W,)
        for role in ("self", "cross", "temporal"):
            for k in attn.ATTN_KEYS:
                shapes[f"{pre}{role}.{k}"] = (W, W) if k.startswith("W") else (W,)
        if cfg.temporal_revision:
            shapes[pre + "lat.z"] = (2 * cfg.frames - 1, cfg.latent_dim)
            shapes[pre + "lat.W_f1"] = (cfg.latent_dim, cfg.f_hidden)
            shapes[pre + "lat.b_f1"] = (cfg.f_hidden,)
            shapes[pre + "lat.W_f2"] = (cfg.f_hidden, 1)
        shapes[pre + "ffn.W1"], shapes[pre + "ffn.b1"] = (W, F), (F,)
        shapes[pre + "ffn.W2"], shapes[pre + "ffn.b2"] = (F, W), (W,)
    shapes["out.W"], shapes["out.b"] = (W, D), (D,)
    return shapes


def _name_rng(seed: int, name: str) -> np.random.Generator:
    # per-name streams keep shared parameters identical across ablation variants
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


def init_params(cfg: DenoiserConfig, seed: int = 0, zero_output: bool = True,
                dtype=None) -> Params:
    """Uniform ``±1/sqrt(fan_in)`` weights, zero biases, unit layer-norm gains.

    The output projection starts at zero unless ``zero_output`` is False.
    """
    dtype = dtype or numeric.get_dtype()
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        rng = _name_rng(seed, name)
        if name.startswith("out.") and zero_output:
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        elif leaf == "z":
            arr = rng.uniform(-1.0, 1.0, size=shape)
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[0])
            arr = rng.uniform(-bound, bound, size=shape)
        else:
            arr = np.zeros(shape)
        params[name] = arr.astype(dtype)
    return params


def sub(params: Params, prefix: str) -> Params:
    n = len(prefix)
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix)}


def timestep_embedding(t, dim: int) -> np.ndarray:
    """Interleaved ``[sin(t w_0), cos(t w_0), sin(t w_1), ...]`` with ``w_i = 10000^(-2i/dim)``."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    t = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-np.arange(dim // 2, dtype=np.float64) * 2.0 / dim)
    ang = t[..., None] * freqs
    out = np.empty(t.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


def _role_masks(role, ts, phase, T, T_prefix=0, prefix_aligned=False):
    masks = [attn.layer_mask(role, int(t), phase, T, T_prefix, prefix_aligned) for t in ts]
    if masks[0] is None:
        return None
    return np.stack(masks)


def _add(grads, key, value):
    if key in grads:
        grads[key] = grads[key] + value
    else:
        grads[key] = value


# ---------------------------------------------------------------- block

def transformer_block_forward(X, b0, a, e, ts, phase: Optional[PhaseConfig], params: Params,
                              cfg: DenoiserConfig, index: int = 0, trace=None):
    """One block. ``X``: (B, T, W); ``b0``: (B, 1, W) or None; ``a``: (B, T_a, W); ``e``: (B, W)."""
    pre = f"blocks.{index}."
    T, T_a = X.shape[-2], a.shape[-2]
    mode = phase.mode if phase is not None else "multiplicative"
    c = {"b0": b0 is not None, "T_a": T_a}

    h = X + e[:, None, :]
    n1, c["ln1"] = numeric.layer_norm(h, params[pre + "ln1.g"], params[pre + "ln1.s"])
    m_self = _role_masks("self", ts, phase, T, 1 if b0 is not None else 0)
    s, c["self"] = attn.biased_self_attention(n1, b0, sub(params, pre + "self."), cfg.heads, m_self, mode)
    h = h + s

    n2, c["ln2"] = numeric.layer_norm(h, params[pre + "ln2.g"], params[pre + "ln2.s"])
    m_cross = _role_masks("cross", ts, phase, T, T_a, prefix_aligned=True)
    x, c["cross"] = attn.biased_cross_attention(n2, a, sub(params, pre + "cross."), cfg.heads, m_cross, mode)
    h = h + x

    n3, c["ln3"] = numeric.layer_norm(h, params[pre + "ln3.g"], params[pre + "ln3.s"])
    m_temp = _role_masks("temporal", ts, phase, T)
    lat = sub(params, pre + "lat.") if cfg.temporal_revision else None
    r, c["temporal"] = attn.revised_temporal_attention(n3, lat, sub(params, pre + "temporal."),
                                                       cfg.heads, m_temp, mode)
    h = h + r

    n4, c["ln4"] = numeric.layer_norm(h, params[pre + "ln4.g"], params[pre + "ln4.s"])
    u = numeric.linear_forward(n4, params[pre + "ffn.W1"], params[pre + "ffn.b1"])
    g = numeric.gelu(u)
    f = numeric.linear_forward(g, params[pre + "ffn.W2"], params[pre + "ffn.b2"])
    h = h + f
    c.update(n4=n4, u=u, g=g, params=params, pre=pre)

    if trace is not None:
        for role, mask in (("self", m_self), ("cross", m_cross), ("temporal", m_temp)):
            rc = c[role]
            trace[pre + role] = dict(
                t=list(int(t) for t in ts), weights_raw=rc["A"], weights=rc["Af"], mask=mask,
                q_in=rc["xq"], kv_in=rc["xkv"], params=rc["p"], heads=cfg.heads,
                score_bias=None if role != "temporal" or rc["rel"] is None
                else attn.relative_bias(lat, T)[0])
    return h, c


def transformer_block_backward(dh, c):
    """Returns ``(dX, d_b0, d_a, d_e, grads)``."""
    params, pre = c["params"], c["pre"]
    grads = {}

    dg, grads[pre + "ffn.W2"], grads[pre + "ffn.b2"] = numeric.linear_backward(dh, c["g"], params[pre + "ffn.W2"])
    du = numeric.gelu_backward(dg, c["u"])
    dn4, grads[pre + "ffn.W1"], grads[pre + "ffn.b1"] = numeric.linear_backward(du, c["n4"], params[pre + "ffn.W1"])
    dx, grads[pre + "ln4.g"], grads[pre + "ln4.s"] = numeric.layer_norm_backward(dn4, c["ln4"])
    dh = dh + dx

    dn3, g_t, g_lat = attn.revised_temporal_attention_backward(dh, c["temporal"])
    grads.update({pre + "temporal." + k: v for k, v in g_t.items()})
    if g_lat is not None:
        grads.update({pre + "lat." + k: v for k, v in g_lat.items()})
    dx, grads[pre + "ln3.g"], grads[pre + "ln3.s"] = numeric.layer_norm_backward(dn3, c["ln3"])
    dh = dh + dx

    dn2, da, g_c = attn.biased_cross_attention_backward(dh, c["cross"], c["T_a"])
    grads.update({pre + "cross." + k: v for k, v in g_c.items()})
    dx, grads[pre + "ln2.g"], grads[pre + "ln2.s"] = numeric.layer_norm_backward(dn2, c["ln2"])
    dh = dh + dx

    dn1, db0, g_s = attn.biased_self_attention_backward(dh, c["self"], c["b0"])
    grads.update({pre + "self." + k: v for k, v in g_s.items()})
    dx, grads[pre + "ln1.g"], grads[pre + "ln1.s"] = numeric.layer_norm_backward(dn1, c["ln1"])
    dh = dh + dx

    de = dh.sum(axis=-2)
    return dh, db0, da, de, grads


# ---------------------------------------------------------------- full network

def eps_theta_forward(params: Params, cfg: DenoiserConfig, x_t, t, beta0, audio,
                      phase: Optional[PhaseConfig] = None, trace=None):
    """Batched forward. ``x_t``: (B, T, D); ``t``: (B,); ``beta0``: (B, D); ``audio``: (B, T_a, A)."""
    if x_t.ndim != 3 or x_t.shape[-1] != cfg.coeff_dim:
        raise ValueError(f"x_t must be (B, T, {cfg.coeff_dim}), got {x_t.shape}")
    B, T, _ = x_t.shape
    if T > cfg.frames:
        raise ValueError(f"sequence length {T} exceeds configured frames {cfg.frames}")
    if audio.shape[:2] != (B, T) or audio.shape[-1] != cfg.audio_dim:
        raise ValueError(f"audio must be ({B}, {T}, {cfg.audio_dim}), got {audio.shape}")
    if beta0.shape != (B, cfg.coeff_dim):
        raise ValueError(f"beta0 must be ({B}, {cfg.coeff_dim}), got {beta0.shape}")
    dtype = params["in.W"].dtype
    ts = np.broadcast_to(np.asarray(t), (B,))
    x_t, beta0, audio = (np.asarray(v, dtype=dtype) for v in (x_t, beta0, audio))

    c = {"cfg": cfg, "params": params, "x_t": x_t, "audio": audio, "beta0": beta0}
    h = numeric.linear_forward(x_t, params["in.W"], params["in.b"])
    temb = timestep_embedding(ts, cfg.width).astype(dtype)
    c["temb"] = temb
    c["e_pre"] = numeric.linear_forward(temb, params["time.W1"], params["time.b1"])
    c["e1"] = numeric.silu(c["e_pre"])
    e = numeric.linear_forward(c["e1"], params["time.W2"], params["time.b2"])
    b0 = None
    if cfg.use_beta0:
        b0 = numeric.linear_forward(beta0[:, None, :], params["beta0.W"], params["beta0.b"])
    a = numeric.linear_forward(audio, params["audio.W"], params["audio.b"])

    c["blocks"] = []
    for i in range(cfg.blocks):
        h, bc = transformer_block_forward(h, b0, a, e, ts, phase, params, cfg, i, trace)
        c["blocks"].append(bc)
    c["h"] = h
    out = numeric.linear_forward(h, params["out.W"], params["out.b"])
    return out, c


def eps_theta_backward(d_eps, c) -> Params:
    params, cfg = c["params"], c["cfg"]
    grads = {}
    dh, grads["out.W"], grads["out.b"] = numeric.linear_backward(d_eps, c["h"], params["out.W"])
    d_b0 = d_a = d_e = 0.0
    for bc in reversed(c["blocks"]):
        dh, db0, da, de, g = transformer_block_backward(dh, bc)
        grads.update(g)
        d_a = d_a + da
        d_e = d_e + de
        if db0 is not None:
            d_b0 = d_b0 + db0
    _, grads["in.W"], grads["in.b"] = numeric.linear_backward(dh, c["x_t"], params["in.W"])
    _, grads["audio.W"], grads["audio.b"] = numeric.linear_backward(d_a, c["audio"], params["audio.W"])
    if cfg.use_beta0:
        _, grads["beta0.W"], grads["beta0.b"] = numeric.linear_backward(
            d_b0, c["beta0"][:, None, :], params["beta0.W"])
    de1, grads["time.W2"], grads["time.b2"] = numeric.linear_backward(d_e, c["e1"], params["time.W2"])
    de_pre = numeric.silu_backward(de1, c["e_pre"])
    _, grads["time.W1"], grads["time.b1"] = numeric.linear_backward(de_pre, c["temb"], params["time.W1"])
    return grads


def eps_theta(x_t, t, beta0, audio, params: Params, cfg: DenoiserConfig,
              phase: Optional[PhaseConfig] = None, trace=None) -> np.ndarray:
    """Predicted noise for one sequence (``x_t``: T x D) or a batch (B x T x D)."""
    single = np.ndim(x_t) == 2
    if single:
        x_t, beta0, audio = x_t[None], np.reshape(beta0, (1, -1)), audio[None]
        t = np.array([t])
    out, _ = eps_theta_forward(params, cfg, x_t, t, beta0, audio, phase, trace)
    return out[0] if single else out
