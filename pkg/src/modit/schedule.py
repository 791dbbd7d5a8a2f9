"""Linear noise schedule and the closed-form diffusion maps.

Timesteps are 1-based: ``t`` runs over ``1..T`` and ``alpha_bar(0)`` is defined as 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ValueError(f"timestep {t} outside 1..{self.T}")

    def abar(self, t: int) -> float:
        """Cumulative signal retention with the ``abar(0) = 1`` convention."""
        if t == 0:
            return 1.0
        self.check_t(t)
        return float(self.alpha_bar[t - 1])

    def beta_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.beta[t - 1])

    def alpha_at(self, t: int) -> float:
        self.check_t(t)
        return float(self.alpha[t - 1])


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    for arr in (beta, alpha, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def forward_noise(x0, t: int, eps, sched: NoiseSchedule):
    if np.shape(x0) != np.shape(eps):
        raise ValueError("x0 and eps shapes differ")
    sched.check_t(t)
    ab = sched.abar(t)
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule):
    if np.shape(x_t) != np.shape(eps_hat):
        raise ValueError("x_t and eps_hat shapes differ")
    sched.check_t(t)
    ab = sched.abar(t)
    return (x_t - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)


def ddim_step(x0_hat, eps_hat, t: int, sched: NoiseSchedule):
    """Deterministic move from ``t`` to ``t - 1``; returns ``x0_hat`` itself at ``t = 1``."""
    sched.check_t(t)
    ab_prev = sched.abar(t - 1)
    return math.sqrt(ab_prev) * x0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


def posterior_variance(t: int, sched: NoiseSchedule) -> float:
    sched.check_t(t)
    if t == 1:
        return 0.0
    return (1.0 - sched.abar(t - 1)) / (1.0 - sched.abar(t)) * sched.beta_at(t)


def posterior_mean(x_t, eps_hat, t: int, sched: NoiseSchedule):
    a, b, ab = sched.alpha_at(t), sched.beta_at(t), sched.abar(t)
    return (x_t - b / math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(a)


def ddpm_posterior_sample(x_t, eps_hat, t: int, noise, sched: NoiseSchedule):
    mean = posterior_mean(x_t, eps_hat, t, sched)
    var = posterior_variance(t, sched)
    if var == 0.0:
        return mean
    return mean + math.sqrt(var) * noise
