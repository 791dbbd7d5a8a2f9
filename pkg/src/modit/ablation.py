"""Single-switch ablations trained and sampled under identical seeds and data."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from . import data, metrics, numeric, runner
from .config import RunConfig, format_value

# each variant flips exactly one key of the base configuration
SWITCHES: Dict[str, Dict[str, object]] = {
    "full": {},
    "no_beta0": {"model.use_beta0": False},
    "no_bias_injection": {"phase.enabled": False},
    "no_temporal_revision": {"model.temporal_revision": False},
    "no_velocity_loss": {"train.lambda_v": 0.0},
}


@dataclass
class Row:
    variant: str
    seed: int
    mse: float
    jitter: float
    error: Optional[str] = None


@dataclass
class AblationReport:
    variants: Tuple[str, ...]
    seeds: Tuple[int, ...]
    rows: List[Row] = field(default_factory=list)
    diffs: Dict[str, List[Tuple[str, str, str]]] = field(default_factory=dict)

    def get(self, variant: str, seed: int) -> Row:
        for r in self.rows:
            if r.variant == variant and r.seed == seed:
                return r
        raise KeyError((variant, seed))

    def wins(self, variant: str, metric: str) -> Tuple[int, int]:
        """Seeds on which ``full`` is strictly lower than ``variant`` on ``metric``, and seeds compared."""
        won = n = 0
        for s in self.seeds:
            f, v = self.get("full", s), self.get(variant, s)
            if f.error or v.error:
                continue
            n += 1
            won += getattr(f, metric) < getattr(v, metric)
        return won, n


def variant_config(base: RunConfig, variant: str) -> RunConfig:
    if variant not in SWITCHES:
        raise ValueError(f"unknown variant {variant!r}")
    return base.updated(SWITCHES[variant]) if SWITCHES[variant] else base


def config_diff(base: RunConfig, other: RunConfig) -> List[Tuple[str, str, str]]:
    return [(k, format_value(base[k]), format_value(other[k])) for k in base if base[k] != other[k]]


def seed_corpus(base: RunConfig, seed: int):
    """Training and held-out pairs for one seed; both follow the same audio-to-expression map."""
    n_train, n_held = base["ablation.train_pairs"], base["ablation.heldout_pairs"]
    spec = replace(base.synth_spec(), seed=seed, num_pairs=n_train + n_held)
    pairs = data.gen_corpus(spec)
    return pairs[:n_train], pairs[n_train:]


def run_variant(cfg: RunConfig, train_pairs, heldout) -> Tuple[float, float]:
    with numeric.precision(cfg["run.precision"]):
        params, _, _ = runner.train_run(cfg, [p.as_training() for p in train_pairs])
        conds = [(p.expression[0], p.audio) for p in heldout]
        seeds = [cfg["run.seed"] * 1000 + i for i in range(len(heldout))]
        samples = runner.sample_run(cfg, params, conds, seeds=seeds)
    mse = float(np.mean([metrics.mse(s, p.expression) for s, p in zip(samples, heldout)]))
    jit = float(np.mean([metrics.jitter(s) for s in samples]))
    return mse, jit


def run_ablation(base: RunConfig, progress: Optional[Callable[[str], None]] = None) -> AblationReport:
    variants = tuple(base["ablation.variants"])
    if "full" not in variants:
        variants = ("full",) + variants
    seeds = tuple(base["ablation.seeds"])
    rep = AblationReport(variants, seeds)
    for v in variants:
        rep.diffs[v] = config_diff(base, variant_config(base, v))
    for s in seeds:
        train_pairs, heldout = seed_corpus(base, s)
        for v in variants:
            cfg = variant_config(base, v).updated({"run.seed": s})
            try:
                mse, jit = run_variant(cfg, train_pairs, heldout)
                rep.rows.append(Row(v, s, mse, jit))
            except Exception as e:  # reported per variant, the sweep continues
                rep.rows.append(Row(v, s, float("nan"), float("nan"), f"{type(e).__name__}: {e}"))
            if progress:
                r = rep.rows[-1]
                progress(f"seed {s} {v}: mse {r.mse:.4g} jitter {r.jitter:.4g}" + (f" ({r.error})" if r.error else ""))
    return rep


def format_report(rep: AblationReport) -> str:
    out = ["# switches relative to the base configuration"]
    for v in rep.variants:
        d = rep.diffs.get(v, [])
        desc = "none" if not d else "; ".join(f"{k}: {a} -> {b}" for k, a, b in d)
        out.append(f"# {v}\t{desc}")
    out.append("variant\tseed\tmse\tjitter\tstatus")
    for r in rep.rows:
        out.append(f"{r.variant}\t{r.seed}\t{r.mse:.6g}\t{r.jitter:.6g}\t{r.error or 'ok'}")
    out.append("")
    out.append("variant\tmse_mean\tmse_sd\tjitter_mean\tjitter_sd\tseeds")
    for v in rep.variants:
        rows = [r for r in rep.rows if r.variant == v and not r.error]
        if not rows:
            out.append(f"{v}\tnan\tnan\tnan\tnan\t0")
            continue
        m = np.array([r.mse for r in rows])
        j = np.array([r.jitter for r in rows])
        out.append(f"{v}\t{m.mean():.6g}\t{m.std():.6g}\t{j.mean():.6g}\t{j.std():.6g}\t{len(rows)}")
    out.append("")
    for v in rep.variants:
        if v == "full":
            continue
        for metric in ("mse", "jitter"):
            won, n = rep.wins(v, metric)
            out.append(f"verdict\t{v}\t{metric}\tfull lower on {won}/{n} seeds")
    return "\n".join(out) + "\n"


def parse_report(text: str) -> Dict[Tuple[str, int], Tuple[float, float]]:
    """Per-(variant, seed) metrics read back from a formatted report."""
    rows = {}
    in_rows = False
    for line in text.splitlines():
        if line.startswith("variant\tseed\t"):
            in_rows = True
            continue
        if in_rows:
            if not line.strip():
                break
            v, s, m, j, _ = line.split("\t")
            rows[(v, int(s))] = (float(m), float(j))
    return rows
