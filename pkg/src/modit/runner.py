"""Config-driven training and sampling shared by the CLI and the ablation harness."""
from __future__ import annotations

from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import denoiser as dn
from . import numeric
from . import training as tr
from .config import RunConfig
from .sampler import sample_batch


def make_setup(cfg: RunConfig) -> tr.TrainSetup:
    return tr.TrainSetup(cfg.model(), cfg.schedule(), cfg.phase(), cfg.loss_weights())


def fresh_state(cfg: RunConfig):
    with numeric.precision(cfg["run.precision"]):
        params = dn.init_params(cfg.model(), seed=cfg["run.seed"])
    opt = tr.init_optimizer(params, lr=cfg["train.lr"], weight_decay=cfg["train.weight_decay"])
    return params, opt


def check_pairs(cfg: RunConfig, pairs: Sequence[tr.TrainingPair]) -> None:
    m = cfg.model()
    for i, p in enumerate(pairs):
        if p.x0.shape != (m.frames, m.coeff_dim) or p.audio.shape != (m.frames, m.audio_dim):
            raise ValueError(f"pair {i}: expression {p.x0.shape} / audio {p.audio.shape} do not match "
                             f"model frames={m.frames}, coeff_dim={m.coeff_dim}, audio_dim={m.audio_dim}")


def train_run(cfg: RunConfig, pairs: List[tr.TrainingPair], params=None, opt=None,
              on_step: Optional[Callable[[dict], None]] = None):
    """Train until ``opt.step == train.steps``; a partially trained state resumes where it stopped."""
    check_pairs(cfg, pairs)
    if params is None:
        params, opt = fresh_state(cfg)
    remaining = cfg["train.steps"] - opt.step
    if remaining < 0:
        raise ValueError(f"state is already at step {opt.step}, beyond train.steps={cfg['train.steps']}")
    batch = min(cfg["train.batch_size"], len(pairs))
    return tr.train(pairs, params, opt, make_setup(cfg), remaining, batch, cfg["run.seed"],
                    on_step=on_step, noise_draws=cfg["train.noise_draws"])


def sample_run(cfg: RunConfig, params, conditions: Sequence[Tuple[np.ndarray, np.ndarray]],
               seeds: Sequence[int] | None = None) -> List[np.ndarray]:
    return sample_batch(list(conditions), params, cfg.schedule(), cfg.sampler(), cfg.model(), seeds=seeds)
