"""Finite-difference audit of every hand-written backward pass on reduced shapes (64-bit)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import numpy as np

from . import attention as attn
from . import blink
from . import denoiser as dn
from . import numeric
from .schedule import build_schedule
from .training import LossWeights, TrainSetup, loss_and_grads, noise_loss_grad, velocity_loss_grad

# Central differences at 1e-5 leave ~1e-4 truncation noise on near-zero gradient
# entries of the full network; 1e-4 keeps every block well clear of the threshold.
DEFAULT_STEP = 1e-4
THRESHOLD = 1e-4


@dataclass
class BlockResult:
    module: str
    block: str
    report: numeric.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.max_relative_error < THRESHOLD


def reduced_model() -> dn.DenoiserConfig:
    return dn.DenoiserConfig(width=16, ffn_width=32, heads=4, blocks=1, frames=4, coeff_dim=64,
                             audio_dim=16, latent_dim=8, f_hidden=16)


def check_phase(T_sched: int) -> attn.PhaseConfig:
    # every role masked so the renormalization backward is exercised everywhere
    return attn.PhaseConfig(t_threshold=max(1, T_sched // 2), bias_targets=frozenset(attn.BIAS_TARGETS))


def _per_block(module: str, fn, params, step: float, names: Sequence[str] | None = None) -> List[BlockResult]:
    out = []
    for name in (names or sorted(params)):
        out.append(BlockResult(module, name, numeric.gradient_check(fn, params, step, names=[name])))
    return out


def _projection(rng, shape):
    return rng.standard_normal(shape)


def check_attention(rng, step) -> List[BlockResult]:
    B, T, W, heads = 2, 4, 8, 2
    X = rng.standard_normal((B, T, W))
    b0 = rng.standard_normal((B, 1, W))
    audio = rng.standard_normal((B, T, W))
    phase = check_phase(10)
    ts = [10, 1]
    results = []

    def attn_params(seed):
        r = np.random.default_rng(seed)
        p = {k: r.uniform(-0.5, 0.5, (W, W)) for k in ("W_q", "W_k", "W_v", "W_o")}
        p.update({k: r.uniform(-0.1, 0.1, W) for k in ("b_q", "b_v", "b_o")})
        return p

    m_self = np.stack([attn.layer_mask("self", t, phase, T, 1) for t in ts])
    R = _projection(rng, (B, T, W))

    def f_self(p):
        Y, c = attn.biased_self_attention(X, b0, p, heads, m_self)
        _, _, g = attn.biased_self_attention_backward(R, c, True)
        return float(np.sum(Y * R)), g
    results += _per_block("attention.self", f_self, attn_params(1), step)

    m_cross = np.stack([attn.layer_mask("cross", t, phase, T, T, prefix_aligned=True) for t in ts])

    def f_cross(p):
        Y, c = attn.biased_cross_attention(X, audio, p, heads, m_cross)
        _, _, g = attn.biased_cross_attention_backward(R, c, T)
        return float(np.sum(Y * R)), g
    results += _per_block("attention.cross", f_cross, attn_params(2), step)

    m_temp = np.stack([attn.layer_mask("temporal", t, phase, T) for t in ts])
    r = np.random.default_rng(3)
    both = attn_params(4)
    both.update({"lat.z": r.uniform(-1, 1, (2 * T - 1, 4)), "lat.W_f1": r.uniform(-0.5, 0.5, (4, 16)),
                 "lat.b_f1": r.uniform(-0.1, 0.1, 16), "lat.W_f2": r.uniform(-0.5, 0.5, (16, 1))})

    def f_temp(p):
        lat = {k[4:]: v for k, v in p.items() if k.startswith("lat.")}
        ap = {k: v for k, v in p.items() if not k.startswith("lat.")}
        Y, c = attn.revised_temporal_attention(X, lat, ap, heads, m_temp)
        _, g, lg = attn.revised_temporal_attention_backward(R, c)
        g = dict(g)
        g.update({"lat." + k: v for k, v in lg.items()})
        return float(np.sum(Y * R)), g
    results += _per_block("attention.temporal", f_temp, both, step)

    # additive mask mode on the cross role
    def f_add(p):
        Y, c = attn.biased_cross_attention(X, audio, p, heads, m_cross, "additive")
        _, _, g = attn.biased_cross_attention_backward(R, c, T)
        return float(np.sum(Y * R)), g
    results += _per_block("attention.cross_additive", f_add, attn_params(5), step)
    return results


def check_block(rng, step) -> List[BlockResult]:
    cfg = reduced_model()
    params = dn.init_params(cfg, seed=7, zero_output=False, dtype=np.float64)
    block = {k: v for k, v in params.items() if k.startswith("blocks.0.")}
    B, T, W = 2, cfg.frames, cfg.width
    X = rng.standard_normal((B, T, W))
    b0 = rng.standard_normal((B, 1, W))
    a = rng.standard_normal((B, T, W))
    e = rng.standard_normal((B, W))
    ts = np.array([10, 1])
    phase = check_phase(10)
    R = _projection(rng, (B, T, W))

    def fn(p):
        h, c = dn.transformer_block_forward(X, b0, a, e, ts, phase, p, cfg, 0)
        *_, g = dn.transformer_block_backward(R, c)
        return float(np.sum(h * R)), g
    return _per_block("block", fn, block, step)


def check_denoiser(rng, step) -> List[BlockResult]:
    """Full noise predictor under the training objective (noise + velocity terms)."""
    cfg = reduced_model()
    sched = build_schedule(10, 1e-2, 0.2)
    params = dn.init_params(cfg, seed=11, zero_output=False, dtype=np.float64)
    setup = TrainSetup(cfg, sched, check_phase(sched.T), LossWeights())
    B = 2
    beta0 = rng.standard_normal((B, cfg.coeff_dim))
    audio = rng.standard_normal((B, cfg.frames, cfg.audio_dim))
    x0 = rng.standard_normal((B, cfg.frames, cfg.coeff_dim))
    eps = rng.standard_normal(x0.shape)
    t = np.array([sched.T, 2])

    def fn(p):
        m, g = loss_and_grads(p, setup, beta0, audio, x0, t, eps)
        return m["L_total"], g
    return _per_block("denoiser", fn, params, step)


def check_losses(rng, step) -> List[BlockResult]:
    eps = rng.standard_normal((3, 5))
    x0 = rng.standard_normal((3, 5))

    def f_noise(p):
        loss, g = noise_loss_grad(eps, p["eps_hat"])
        return loss, {"eps_hat": g}

    def f_vel(p):
        loss, g = velocity_loss_grad(x0, p["x0_hat"])
        return loss, {"x0_hat": g}
    return (_per_block("losses.noise", f_noise, {"eps_hat": rng.standard_normal((3, 5))}, step)
            + _per_block("losses.velocity", f_vel, {"x0_hat": rng.standard_normal((3, 5))}, step))


def check_blink(rng, step) -> List[BlockResult]:
    cfg = blink.BlinkConfig(coeff_dim=6, width=5, stages=3, bins=7)
    # redraw until no LeakyReLU input sits within a few steps of the kink,
    # where central differences straddle the slope change
    while True:
        params = blink.init_params(cfg, seed=3)
        for k in params:
            if k.endswith(".b"):
                params[k] = rng.uniform(-0.1, 0.1, params[k].shape)
        win = rng.standard_normal((5, cfg.coeff_dim))
        bl = rng.uniform(0, 1, 5)
        _, stages = blink.blink_fuse(win, bl, params, cfg)
        if min(np.abs(pre).min() for _, pre in stages) > 10 * step:
            break
    proj = {"yaw": rng.standard_normal(5), "pitch": rng.standard_normal(5), "roll": rng.standard_normal(5),
            "tr_prime": rng.standard_normal((5, 3)), "delta_prime": rng.standard_normal((5, cfg.coeff_dim))}

    def fn(p):
        out, c = blink.mapping_net(win, bl, p, cfg)
        loss = sum(float(np.sum(getattr(out, k) * v)) for k, v in proj.items())
        _, g = blink.mapping_net_backward(proj, c, p, cfg)
        return loss, g
    return _per_block("blink", fn, params, step)


CHECKS: Dict[str, Callable] = {
    "attention": check_attention,
    "block": check_block,
    "denoiser": check_denoiser,
    "losses": check_losses,
    "blink": check_blink,
}


def run(step: float = DEFAULT_STEP, seed: int = 0, modules: Sequence[str] | None = None) -> List[BlockResult]:
    results = []
    with numeric.precision("f64"):
        for name in (modules or CHECKS):
            results += CHECKS[name](np.random.default_rng([seed, len(name)]), step)
    return results


def format_report(results: Sequence[BlockResult]) -> str:
    lines = ["module\tblock\tmax_rel_err\tworst_index\tchecked\tstatus"]
    for r in results:
        idx = "" if r.report.worst_parameter_index is None else str(r.report.worst_parameter_index[1])
        lines.append(f"{r.module}\t{r.block}\t{r.report.max_relative_error:.3e}\t{idx}\t"
                     f"{r.report.checked}\t{'ok' if r.passed else 'FAIL'}")
    return "\n".join(lines) + "\n"
