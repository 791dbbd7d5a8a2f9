"""Losses, AdamW, and the deterministic training loop."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from . import denoiser as dn
from .attention import PhaseConfig
from .schedule import NoiseSchedule


class NumericAbort(RuntimeError):
    def __init__(self, message: str, component: str | None = None, step: int | None = None):
        super().__init__(message)
        self.component = component
        self.step = step


@dataclass(frozen=True)
class LossWeights:
    lambda_t: float = 10.0
    lambda_read: float = 0.2
    lambda_lks: float = 0.1
    lambda_v: float = 0.1

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"{k} must be >= 0")


@dataclass
class TrainingPair:
    beta0: np.ndarray   # (D,) source-frame coefficients
    audio: np.ndarray   # (T, A)
    x0: np.ndarray      # (T, D)


# ---------------------------------------------------------------- losses

def noise_loss(eps, eps_hat) -> float:
    if np.shape(eps) != np.shape(eps_hat):
        raise ValueError("eps and eps_hat shapes differ")
    d = np.asarray(eps_hat, dtype=np.float64) - eps
    return float(np.mean(d * d))


def noise_loss_grad(eps, eps_hat):
    d = eps_hat - eps
    return float(np.mean(np.square(d, dtype=np.float64))), 2.0 * d / d.size


def velocity_loss(x0, x0_hat) -> float:
    return velocity_loss_grad(x0, x0_hat)[0]


def velocity_loss_grad(x0, x0_hat):
    """MSE between first temporal differences; returns ``(loss, d_loss/d_x0_hat)``."""
    if np.shape(x0) != np.shape(x0_hat):
        raise ValueError("x0 and x0_hat shapes differ")
    if np.shape(x0)[-2] < 2:
        raise ValueError("velocity loss needs at least two frames")
    r = np.diff(x0_hat, axis=-2) - np.diff(x0, axis=-2)
    loss = float(np.mean(np.square(r, dtype=np.float64)))
    dr = 2.0 * r / r.size
    grad = np.zeros_like(x0_hat)
    grad[..., 1:, :] += dr
    grad[..., :-1, :] -= dr
    return loss, grad


def total_loss(l_t: float, l_read: float, l_lks: float, l_v: float, w: LossWeights = LossWeights()) -> float:
    return w.lambda_t * l_t + w.lambda_read * l_read + w.lambda_lks * l_lks + w.lambda_v * l_v


def zero_hook(x0, x0_hat):
    return 0.0


AuxHook = Callable[[np.ndarray, np.ndarray], object]


def _call_hook(hook: AuxHook, x0, x0_hat):
    """Hooks return a scalar, or ``(scalar, grad wrt x0_hat)`` when they are trainable."""
    out = hook(x0, x0_hat)
    if isinstance(out, tuple):
        return float(out[0]), out[1]
    return float(out), None


# ---------------------------------------------------------------- AdamW

@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    lr: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params, lr: float = 1e-4, weight_decay: float = 0.01, **kw) -> OptimizerState:
    zeros = {k: np.zeros_like(v) for k, v in params.items()}
    return OptimizerState(m=zeros, v={k: np.zeros_like(v) for k, v in params.items()},
                          lr=lr, weight_decay=weight_decay, **kw)


def adamw_update(params, grads, opt: OptimizerState):
    """One decoupled-weight-decay Adam step. Inputs are left untouched."""
    step = opt.step + 1
    bc1 = 1.0 - opt.beta1 ** step
    bc2 = 1.0 - opt.beta2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k].astype(p.dtype, copy=False)
        m = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        v = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * (g * g)
        upd = (m / bc1) / (np.sqrt(v / bc2) + opt.eps) + opt.weight_decay * p
        new_p[k] = p - opt.lr * upd
        new_m[k], new_v[k] = m, v
    return new_p, OptimizerState(new_m, new_v, step, opt.lr, opt.weight_decay,
                                 opt.beta1, opt.beta2, opt.eps)


# ---------------------------------------------------------------- steps

@dataclass
class TrainSetup:
    model: dn.DenoiserConfig
    sched: NoiseSchedule
    phase: Optional[PhaseConfig] = None
    weights: LossWeights = field(default_factory=LossWeights)
    read_hook: AuxHook = zero_hook
    lks_hook: AuxHook = zero_hook


def stack_batch(batch: Sequence[TrainingPair], dtype):
    beta0 = np.stack([p.beta0 for p in batch]).astype(dtype)
    audio = np.stack([p.audio for p in batch]).astype(dtype)
    x0 = np.stack([p.x0 for p in batch]).astype(dtype)
    return beta0, audio, x0


def _noise_coeffs(sched: NoiseSchedule, t, dtype):
    ab = sched.alpha_bar[np.asarray(t) - 1]
    return (np.sqrt(ab).astype(dtype)[:, None, None], np.sqrt(1.0 - ab).astype(dtype)[:, None, None])


def loss_and_grads(params, setup: TrainSetup, beta0, audio, x0, t, eps):
    """Weighted training loss for fixed ``t``/``eps`` with its parameter gradients."""
    sa, sb = _noise_coeffs(setup.sched, t, x0.dtype)
    x_t = sa * x0 + sb * eps
    eps_hat, cache = dn.eps_theta_forward(params, setup.model, x_t, t, beta0, audio, setup.phase)
    w = setup.weights

    l_t, d_eps_hat = noise_loss_grad(eps, eps_hat)
    d_eps_hat = w.lambda_t * d_eps_hat
    x0_hat = (x_t - sb * eps_hat) / sa
    l_v, d_x0_hat = velocity_loss_grad(x0, x0_hat)
    d_x0_hat = w.lambda_v * d_x0_hat
    l_read, g_read = _call_hook(setup.read_hook, x0, x0_hat)
    l_lks, g_lks = _call_hook(setup.lks_hook, x0, x0_hat)
    if g_read is not None:
        d_x0_hat = d_x0_hat + w.lambda_read * g_read
    if g_lks is not None:
        d_x0_hat = d_x0_hat + w.lambda_lks * g_lks
    d_eps_hat = d_eps_hat - (sb / sa) * d_x0_hat

    metrics = {"L_t": l_t, "L_v": l_v, "L_read": l_read, "L_lks": l_lks,
               "L_total": total_loss(l_t, l_read, l_lks, l_v, w)}
    for name, val in metrics.items():
        if not math.isfinite(val):
            raise NumericAbort(f"non-finite {name}", component=name)
    grads = dn.eps_theta_backward(d_eps_hat.astype(eps_hat.dtype, copy=False), cache)
    return metrics, grads


def draw_noise(sched: NoiseSchedule, shape, rng_seed: int, step: int, dtype):
    rng = np.random.default_rng([rng_seed, step])
    t = rng.integers(1, sched.T + 1, size=shape[0])
    eps = rng.standard_normal(shape).astype(dtype)
    return t, eps


def train_step(batch: Sequence[TrainingPair], params, opt: OptimizerState, setup: TrainSetup, rng_seed: int):
    """Sample ``t``/``eps`` per item from the (seed, step) stream, backprop, AdamW-update."""
    if not batch:
        raise ValueError("empty batch")
    dtype = params["in.W"].dtype
    beta0, audio, x0 = stack_batch(batch, dtype)
    t, eps = draw_noise(setup.sched, x0.shape, rng_seed, opt.step, dtype)
    try:
        metrics, grads = loss_and_grads(params, setup, beta0, audio, x0, t, eps)
    except NumericAbort as e:
        e.step = opt.step
        raise
    params, opt = adamw_update(params, grads, opt)
    metrics["step"] = opt.step
    return params, opt, metrics


def batch_indices(n_pairs: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    """Batch for global ``step``: fixed-size, without replacement inside each shuffled epoch."""
    if not 1 <= batch_size <= n_pairs:
        raise ValueError(f"batch size {batch_size} must lie in 1..{n_pairs}")
    per_epoch = n_pairs // batch_size
    epoch, k = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, 0x5EED, epoch]).permutation(n_pairs)
    return perm[k * batch_size:(k + 1) * batch_size]


def train(pairs: List[TrainingPair], params, opt: OptimizerState, setup: TrainSetup, steps: int,
          batch_size: int, seed: int, on_step: Callable[[dict], None] | None = None, noise_draws: int = 1):
    """Run ``steps`` more updates starting from ``opt.step``; resuming continues the same streams.

    ``noise_draws`` repeats every selected pair that many times inside the batch, each
    copy with its own ``(t, eps)`` draw.
    """
    if noise_draws < 1:
        raise ValueError("noise_draws must be >= 1")
    history = []
    for _ in range(steps):
        idx = batch_indices(len(pairs), batch_size, seed, opt.step)
        batch = [pairs[i] for i in idx for _ in range(noise_draws)]
        params, opt, metrics = train_step(batch, params, opt, setup, seed)
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
    return params, opt, history


def evaluate_noise_loss(pairs: Sequence[TrainingPair], params, setup: TrainSetup,
                        n_timesteps: int = 50, seed: int = 12345) -> float:
    """Noise-prediction MSE on a fixed grid of timesteps with fixed noise.

    Used for before/after comparisons, where the per-step training loss is too noisy.
    """
    dtype = params["in.W"].dtype
    ts = np.unique(np.linspace(1, setup.sched.T, n_timesteps).round().astype(int))
    beta0, audio, x0 = stack_batch(pairs, dtype)
    rng = np.random.default_rng(seed)
    total = 0.0
    for t in ts:
        eps = rng.standard_normal(x0.shape).astype(dtype)
        tt = np.full(len(pairs), t)
        sa, sb = _noise_coeffs(setup.sched, tt, dtype)
        eps_hat, _ = dn.eps_theta_forward(params, setup.model, sa * x0 + sb * eps, tt, beta0, audio, setup.phase)
        total += noise_loss(eps, eps_hat)
    return total / len(ts)
