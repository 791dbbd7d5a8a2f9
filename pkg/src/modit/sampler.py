"""Reverse-diffusion generation with phase-switched bias injection."""
from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import denoiser as dn
from .attention import PhaseConfig
from .schedule import NoiseSchedule, ddim_step, ddpm_posterior_sample, predict_x0
from .training import NumericAbort

MODES = ("ddim", "ddpm")


@dataclass(frozen=True)
class SamplerConfig:
    mode: str = "ddim"
    phase: Optional[PhaseConfig] = field(default_factory=PhaseConfig)
    resample_inner: int = 0
    seed: int = 0
    overlap: int = 4
    clip_x0: Optional[float] = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.resample_inner < 0:
            raise ValueError("resample_inner must be >= 0")
        if self.overlap < 0:
            raise ValueError("overlap must be >= 0")
        if self.clip_x0 is not None and self.clip_x0 <= 0:
            raise ValueError("clip_x0 must be positive")


class SampleError(RuntimeError):
    def __init__(self, index: int, cause: Exception):
        super().__init__(f"request {index} failed: {cause}")
        self.index = index
        self.cause = cause


Denoise = Callable[[np.ndarray, int], np.ndarray]


def reverse_loop(x_T: np.ndarray, denoise: Denoise, sched: NoiseSchedule, mode: str,
                 rng: np.random.Generator, resample_inner: int = 0,
                 on_step: Callable[[int, np.ndarray], None] | None = None,
                 clip_x0: float | None = None) -> np.ndarray:
    """Iterate ``t = T..1`` from ``x_T``; returns the final ``x_0`` estimate.

    ``resample_inner`` re-noises ``x_{t-1}`` back to level ``t`` and repeats the
    step that many extra times (off by default). ``clip_x0`` clamps each ``x0_hat``
    to ``[-clip_x0, clip_x0]`` and re-derives the noise estimate from the clamped value.
    """
    x = x_T
    for t in range(sched.T, 0, -1):
        stochastic = mode == "ddpm" or resample_inner > 0
        reps = resample_inner + 1 if t > 1 else 1
        for r in range(reps):
            noise = rng.standard_normal(x.shape).astype(x.dtype) if (stochastic and t > 1) else None
            eps_hat = denoise(x, t)
            x0_hat = predict_x0(x, eps_hat, t, sched)
            if clip_x0 is not None:
                x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
                ab = sched.abar(t)
                eps_hat = (x - math.sqrt(ab) * x0_hat) / math.sqrt(1.0 - ab)
            if mode == "ddim":
                x_prev = ddim_step(x0_hat, eps_hat, t, sched)
            else:
                x_prev = ddpm_posterior_sample(x, eps_hat, t, 0.0 if noise is None else noise, sched)
            if r < reps - 1:
                b = sched.beta_at(t)
                x = math.sqrt(1.0 - b) * x_prev + math.sqrt(b) * rng.standard_normal(x.shape).astype(x.dtype)
        if not np.isfinite(x_prev).all():
            raise NumericAbort(f"non-finite state after step t={t}", component="sampler", step=t)
        x = x_prev
        if on_step is not None:
            on_step(t, x)
    return x


def model_denoiser(beta0, audio, params, model_cfg: dn.DenoiserConfig, phase: Optional[PhaseConfig],
                   attn_trace: dict | None = None, trace_at: Sequence[int] = ()) -> Denoise:
    dtype = params["in.W"].dtype
    b0 = np.asarray(beta0, dtype=dtype).reshape(1, -1)
    au = np.asarray(audio, dtype=dtype)[None]

    def denoise(x, t):
        tr = {} if (attn_trace is not None and t in trace_at) else None
        out, _ = dn.eps_theta_forward(params, model_cfg, x[None], np.array([t]), b0, au, phase, tr)
        if tr is not None:
            attn_trace[t] = tr
        return out[0]
    return denoise


def _sample_window(beta0, audio, params, sched, cfg: SamplerConfig, model_cfg, rng,
                   trace: dict | None):
    dtype = params["in.W"].dtype
    x_T = rng.standard_normal((audio.shape[0], model_cfg.coeff_dim)).astype(dtype)
    attn_trace = norms = None
    trace_at: Sequence[int] = ()
    if trace is not None:
        attn_trace = trace.setdefault("attention", {})
        norms = trace.setdefault("norms", [])
        trace_at = trace.get("trace_at", (sched.T, 1))
    denoise = model_denoiser(beta0, audio, params, model_cfg, cfg.phase, attn_trace, trace_at)
    on_step = None if norms is None else (lambda t, x: norms.append((t, float(np.linalg.norm(x)))))
    return reverse_loop(x_T, denoise, sched, cfg.mode, rng, cfg.resample_inner, on_step, cfg.clip_x0)


def window_starts(n: int, length: int, overlap: int) -> List[int]:
    """Start frames of the windows covering ``n`` frames; the last window ends at ``n``."""
    if n <= length:
        return [0]
    stride = length - overlap
    if stride < 1:
        raise ValueError("overlap must be smaller than the window length")
    starts = list(range(0, n - length, stride))
    starts.append(n - length)
    return starts


def stitch(windows: Sequence[np.ndarray], starts: Sequence[int], n: int) -> np.ndarray:
    """Linear cross-fade across each overlap, weights ``k / (overlap + 1)`` toward the new window."""
    out = np.zeros((n,) + windows[0].shape[1:], dtype=windows[0].dtype)
    end = 0
    for win, s in zip(windows, starts):
        ov = max(0, end - s)
        if ov:
            w = (np.arange(1, ov + 1) / (ov + 1)).astype(out.dtype)[:, None]
            out[s:end] = (1 - w) * out[s:end] + w * win[:ov]
        out[s + ov:s + len(win)] = win[ov:]
        end = s + len(win)
    return out


def sample(beta0, audio, params, sched: NoiseSchedule, cfg: SamplerConfig,
           model_cfg: dn.DenoiserConfig, trace: dict | None = None) -> np.ndarray:
    """Generate a ``T x coeff_dim`` sequence for one ``(beta0, audio)`` condition.

    Audio longer than ``model_cfg.frames`` is covered by overlapping windows that
    share ``beta0`` and are cross-faded together.
    """
    audio = np.asarray(audio)
    n = audio.shape[0]
    L = model_cfg.frames
    starts = window_starts(n, L, cfg.overlap)
    windows = []
    for w, s in enumerate(starts):
        rng = np.random.default_rng([cfg.seed, w])
        win_trace = trace if w == 0 else None
        windows.append(_sample_window(beta0, audio[s:s + min(L, n)], params, sched, cfg,
                                      model_cfg, rng, win_trace))
    if trace is not None:
        trace["windows"] = starts
    if len(windows) == 1:
        return windows[0]
    return stitch(windows, starts, n)


def derive_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MODIT_THREADS", "1")))
    except ValueError:
        return 1


def sample_batch(requests: Sequence[Tuple[np.ndarray, np.ndarray]], params, sched: NoiseSchedule,
                 cfg: SamplerConfig, model_cfg: dn.DenoiserConfig,
                 seeds: Sequence[int] | None = None) -> List[np.ndarray]:
    """Independent :func:`sample` calls, one derived seed per request."""
    if not requests:
        return []
    n0 = np.shape(requests[0][1])[0]
    for i, (_, audio) in enumerate(requests):
        if np.shape(audio)[0] != n0:
            raise SampleError(i, ValueError(f"request has {np.shape(audio)[0]} frames, expected {n0}"))
    if seeds is None:
        seeds = [derive_seed(cfg.seed, i) for i in range(len(requests))]

    def run(i):
        b0, au = requests[i]
        try:
            return sample(b0, au, params, sched, replace(cfg, seed=int(seeds[i])), model_cfg)
        except Exception as e:  # annotate with the request index
            raise SampleError(i, e) from e

    workers = min(_threads(), len(requests))
    if workers == 1:
        return [run(i) for i in range(len(requests))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, range(len(requests))))
