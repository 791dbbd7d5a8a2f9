"""Blink-conditioned mapping net, binned pose heads, and linear face-shape assembly."""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np

from .numeric import leaky_relu, leaky_relu_backward, linear_backward, softmax_backward, softmax_rows

ANGLES = ("yaw", "pitch", "roll")
EYELID_PAIR = (0, 1)
# coefficient on expression channel 0 that nearly closes the toy eye (distance 0.1);
# the gap leaves room for head error before the lids would cross
FULL_CLOSURE = 0.9 / math.sqrt(2.0)

Params = Dict[str, np.ndarray]


@dataclass(frozen=True)
class BlinkConfig:
    coeff_dim: int = 64
    width: int = 32
    stages: int = 3
    kernel: int = 3
    bins: int = 66
    angle_range: Tuple[float, float] = (-math.pi / 2, math.pi / 2)

    def __post_init__(self):
        if self.stages < 1 or self.width < 1:
            raise ValueError("stages and width must be >= 1")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValueError("kernel must be odd and positive")
        if self.bins < 2:
            raise ValueError("need at least two pose bins")
        lo, hi = self.angle_range
        if not lo < hi:
            raise ValueError("angle range must satisfy lo < hi")


@dataclass
class PoseOutput:
    yaw: np.ndarray
    pitch: np.ndarray
    roll: np.ndarray
    tr_prime: np.ndarray     # (W, 3)
    delta_prime: np.ndarray  # (W, coeff_dim)


def param_shapes(cfg: BlinkConfig) -> "OrderedDict[str, tuple]":
    shapes = OrderedDict()
    c_in = cfg.coeff_dim + 1
    for i in range(cfg.stages):
        shapes[f"conv.{i}.W"] = (cfg.kernel, c_in, cfg.width)
        shapes[f"conv.{i}.b"] = (cfg.width,)
        c_in = cfg.width
    for a in ANGLES:
        shapes[f"{a}.W"] = (cfg.width, cfg.bins)
        shapes[f"{a}.b"] = (cfg.bins,)
    shapes["tr.W"] = (cfg.width, 3)
    shapes["tr.b"] = (3,)
    shapes["delta.W"] = (cfg.width, cfg.coeff_dim)
    shapes["delta.b"] = (cfg.coeff_dim,)
    return shapes


def init_params(cfg: BlinkConfig, seed: int = 0, dtype=np.float64) -> Params:
    rng = np.random.default_rng([seed, 0xB1])
    out = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".b"):
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = int(np.prod(shape[:-1]))
            lim = 1.0 / math.sqrt(fan_in)
            out[name] = rng.uniform(-lim, lim, size=shape).astype(dtype)
    return out


def bin_centers(bins: int, lo: float, hi: float) -> np.ndarray:
    return lo + (np.arange(bins) + 0.5) * (hi - lo) / bins


# ---------------------------------------------------------------- conv1d

def conv1d(x: np.ndarray, W: np.ndarray, b: np.ndarray):
    """Same-padded temporal convolution. ``x`` (..., T, C_in), ``W`` (k, C_in, C_out)."""
    k = W.shape[0]
    r = k // 2
    T = x.shape[-2]
    pad = [(0, 0)] * (x.ndim - 2) + [(r, r), (0, 0)]
    xp = np.pad(x, pad)
    y = np.broadcast_to(b, x.shape[:-1] + (W.shape[2],)).copy()
    for j in range(k):
        y += xp[..., j:j + T, :] @ W[j]
    return y, xp


def conv1d_backward(dy: np.ndarray, xp: np.ndarray, W: np.ndarray):
    k = W.shape[0]
    r = k // 2
    T = dy.shape[-2]
    dW = np.empty_like(W)
    dxp = np.zeros_like(xp)
    dy2 = dy.reshape(-1, dy.shape[-1])
    for j in range(k):
        dW[j] = xp[..., j:j + T, :].reshape(-1, xp.shape[-1]).T @ dy2
        dxp[..., j:j + T, :] += dy @ W[j].T
    return dxp[..., r:r + T, :], dW, dy2.sum(axis=0)


# ---------------------------------------------------------------- fuse + heads

def blink_fuse(beta_window: np.ndarray, blink: np.ndarray, params: Params, cfg: BlinkConfig = BlinkConfig()):
    """Stacked conv -> LeakyReLU stages over [expression window | blink]; returns (features, cache)."""
    beta_window = np.asarray(beta_window)
    blink = np.asarray(blink, dtype=beta_window.dtype)
    if beta_window.ndim < 2 or beta_window.shape[:-1] != blink.shape:
        raise ValueError("beta window and blink track must cover the same frames")
    if beta_window.shape[-2] < cfg.kernel:
        raise ValueError(f"window of {beta_window.shape[-2]} frames is shorter than the kernel ({cfg.kernel})")
    h = np.concatenate([beta_window, blink[..., None]], axis=-1)
    stages = []
    for i in range(cfg.stages):
        pre, xp = conv1d(h, params[f"conv.{i}.W"], params[f"conv.{i}.b"])
        stages.append((xp, pre))
        h = leaky_relu(pre)
    return h, stages


def blink_fuse_backward(d_feat: np.ndarray, stages, params: Params, cfg: BlinkConfig = BlinkConfig()):
    grads = {}
    d = d_feat
    for i in reversed(range(cfg.stages)):
        xp, pre = stages[i]
        d = leaky_relu_backward(d, pre)
        d, grads[f"conv.{i}.W"], grads[f"conv.{i}.b"] = conv1d_backward(d, xp, params[f"conv.{i}.W"])
    return d[..., :-1], grads  # drop the blink channel's input gradient


def binned_angle(logits: np.ndarray, centers: np.ndarray):
    p = softmax_rows(logits)
    return p @ centers, p


def pose_head(features: np.ndarray, params: Params, cfg: BlinkConfig = BlinkConfig()):
    centers = bin_centers(cfg.bins, *cfg.angle_range).astype(features.dtype)
    angles, probs = {}, {}
    for a in ANGLES:
        angles[a], probs[a] = binned_angle(features @ params[f"{a}.W"] + params[f"{a}.b"], centers)
    tr = features @ params["tr.W"] + params["tr.b"]
    delta = features @ params["delta.W"] + params["delta.b"]
    out = PoseOutput(angles["yaw"], angles["pitch"], angles["roll"], tr, delta)
    return out, (features, probs, centers)


def pose_head_backward(d_out: Dict[str, np.ndarray], cache, params: Params):
    """``d_out`` maps any of yaw/pitch/roll/tr_prime/delta_prime to an upstream gradient."""
    features, probs, centers = cache
    grads = {k: np.zeros_like(v) for k, v in params.items() if not k.startswith("conv.")}
    d_feat = np.zeros_like(features)
    for a in ANGLES:
        if a not in d_out:
            continue
        dl = softmax_backward(probs[a], d_out[a][..., None] * centers)
        dx, grads[f"{a}.W"], grads[f"{a}.b"] = linear_backward(dl, features, params[f"{a}.W"])
        d_feat += dx
    for key, head in (("tr_prime", "tr"), ("delta_prime", "delta")):
        if key in d_out:
            dx, grads[f"{head}.W"], grads[f"{head}.b"] = linear_backward(d_out[key], features, params[f"{head}.W"])
            d_feat += dx
    return d_feat, grads


def mapping_net(beta_window, blink, params: Params, cfg: BlinkConfig = BlinkConfig()):
    feat, fcache = blink_fuse(beta_window, blink, params, cfg)
    out, hcache = pose_head(feat, params, cfg)
    return out, (fcache, hcache)


def mapping_net_backward(d_out, cache, params: Params, cfg: BlinkConfig = BlinkConfig()):
    fcache, hcache = cache
    d_feat, grads = pose_head_backward(d_out, hcache, params)
    d_beta, cgrads = blink_fuse_backward(d_feat, fcache, params, cfg)
    grads.update(cgrads)
    return d_beta, grads


# ---------------------------------------------------------------- face basis

@dataclass
class ToyFaceBasis:
    mean_shape: np.ndarray  # (V, 3)
    U_id: np.ndarray        # (V, 3, 80)
    U_exp: np.ndarray       # (V, 3, 64)

    def __post_init__(self):
        V = self.mean_shape.shape[0]
        if V < 4 or self.mean_shape.shape != (V, 3):
            raise ValueError("mean shape must be V x 3 with V >= 4")
        if self.U_id.shape[:2] != (V, 3) or self.U_exp.shape[:2] != (V, 3):
            raise ValueError("basis tensors must be V x 3 x K")


def toy_basis(vertices: int = 32, id_dim: int = 80, exp_dim: int = 64, seed: int = 0) -> ToyFaceBasis:
    """Synthetic basis whose expression channel 0 closes the eye formed by vertices 0 and 1.

    Lids start 1 apart. Channel 0 moves them toward each other by ``sqrt(2)`` per
    unit coefficient; every other expression column leaves both lids fixed.
    """
    n = vertices * 3
    if exp_dim > n - 6 + 1 or id_dim > n:
        raise ValueError("too few vertices for the requested basis sizes")
    rng = np.random.default_rng([seed, 0xFACE])
    mean = rng.normal(0.0, 0.3, size=(vertices, 3))
    mean[0] = (0.0, 0.5, 0.0)
    mean[1] = (0.0, -0.5, 0.0)
    U_id = np.linalg.qr(rng.standard_normal((n, id_dim)))[0] if id_dim <= n else None
    s = 1.0 / math.sqrt(2.0)
    U_exp = np.zeros((n, exp_dim))
    U_exp[1, 0] = -s   # vertex 0, y
    U_exp[4, 0] = s    # vertex 1, y
    if exp_dim > 1:
        rest = np.linalg.qr(rng.standard_normal((n - 6, exp_dim - 1)))[0]
        U_exp[6:, 1:] = rest
    return ToyFaceBasis(mean, U_id.reshape(vertices, 3, id_dim), U_exp.reshape(vertices, 3, exp_dim))


def assemble_shape(alpha_id, beta_exp, basis: ToyFaceBasis) -> np.ndarray:
    alpha_id = np.asarray(alpha_id, dtype=np.float64)
    beta_exp = np.asarray(beta_exp, dtype=np.float64)
    if alpha_id.shape != basis.U_id.shape[2:] or beta_exp.shape != basis.U_exp.shape[2:]:
        raise ValueError(f"coefficient sizes {alpha_id.shape}, {beta_exp.shape} do not match basis "
                         f"{basis.U_id.shape[2]}, {basis.U_exp.shape[2]}")
    return basis.mean_shape + basis.U_id @ alpha_id + basis.U_exp @ beta_exp


def eye_closure_distance(vertices: np.ndarray, pair: Tuple[int, int] = EYELID_PAIR) -> float:
    V = vertices.shape[0]
    i, j = pair
    if not (0 <= i < V and 0 <= j < V):
        raise IndexError(f"eyelid indices {pair} outside 0..{V - 1}")
    return float(np.linalg.norm(vertices[i] - vertices[j]))


# ---------------------------------------------------------------- toy training

def closure_target(beta_window: np.ndarray, blink: np.ndarray) -> np.ndarray:
    """Adjustment that sets channel 0 to ``FULL_CLOSURE * blink`` and leaves the rest alone."""
    target = np.zeros_like(beta_window)
    target[..., 0] = FULL_CLOSURE * blink - beta_window[..., 0]
    return target


def delta_loss(beta_window, blink, params: Params, cfg: BlinkConfig = BlinkConfig()):
    out, cache = mapping_net(beta_window, blink, params, cfg)
    r = out.delta_prime - closure_target(beta_window, blink)
    loss = float(np.mean(r * r))
    _, grads = mapping_net_backward({"delta_prime": 2.0 * r / r.size}, cache, params, cfg)
    return loss, grads


def train_blink_head(windows, blinks, cfg: BlinkConfig = BlinkConfig(), steps: int = 1500,
                     lr: float = 3e-3, batch: int = 16, seed: int = 0):
    """Fit the fuse stages and the adjustment head on (expression window, blink) pairs."""
    from .training import adamw_update, batch_indices, init_optimizer

    windows = np.asarray(windows, dtype=np.float64)
    blinks = np.asarray(blinks, dtype=np.float64)
    params = init_params(cfg, seed)
    opt = init_optimizer(params, lr=lr, weight_decay=0.0)
    batch = min(batch, len(windows))
    history = []
    for step in range(steps):
        idx = batch_indices(len(windows), batch, seed, step)
        loss, grads = delta_loss(windows[idx], blinks[idx], params, cfg)
        for k in params:
            grads.setdefault(k, np.zeros_like(params[k]))
        params, opt = adamw_update(params, grads, opt)
        history.append(loss)
    return params, history


def blink_training_set(n: int, frames: int = 12, coeff_dim: int = 64, seed: int = 0):
    """Expression windows from ``n`` independently seeded synthetic generators, with random blink tracks."""
    from . import data

    rng = np.random.default_rng([seed, 0xB7])
    windows, blinks = [], []
    for i in range(n):
        spec = data.SynthSpec(seed=int(rng.integers(2**31)), num_pairs=1, T_frames=frames, coeff_dim=coeff_dim)
        _, expr, _ = data.gen_pair(spec, 0)
        windows.append(expr)
        # mix pulse tracks with constant levels so the whole [0, 1] range is covered
        b = data.blink_track(rng, frames) if i % 2 == 0 else np.full(frames, rng.uniform(0, 1))
        blinks.append(b)
    return np.array(windows), np.array(blinks)


def closure_curve(params: Params, beta_window: np.ndarray, basis: ToyFaceBasis,
                  levels=np.linspace(0.0, 1.0, 11), cfg: BlinkConfig = BlinkConfig(),
                  frame: int | None = None) -> np.ndarray:
    """Eyelid distance at the middle frame when a constant blink level is applied."""
    frame = beta_window.shape[0] // 2 if frame is None else frame
    alpha = np.zeros(basis.U_id.shape[2])
    out = []
    for lv in levels:
        pose, _ = mapping_net(beta_window, np.full(beta_window.shape[0], lv), params, cfg)
        beta = beta_window[frame] + pose.delta_prime[frame]
        out.append(eye_closure_distance(assemble_shape(alpha, beta, basis)))
    return np.array(out)
