"""``modit`` command line: gen-data | train | sample | eval | gradcheck | ablate."""
from __future__ import annotations

import argparse
import datetime
import os
import sys
from typing import List, Optional

import numpy as np

from . import checkpoint as ckpt
from . import data
from . import denoiser as dn
from . import metrics
from . import numeric
from . import runner
from .config import ConfigError, RunConfig, load as load_config
from .sampler import SampleError, window_starts
from .training import NumericAbort

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
LOG_HEADER = "step\tL_t\tL_v\tL_total\ttimestamp\n"


class DataError(Exception):
    pass


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["run.seed"] = args.seed
    if getattr(args, "precision", None) is not None:
        over["run.precision"] = args.precision
    return cfg.updated(over) if over else cfg


def _read_pairs(path) -> List[data.SynthPair]:
    try:
        return data.read_dataset(path)
    except OSError as e:
        raise DataError(f"cannot read dataset {path}: {e.strerror}") from None


def _log_line(m) -> str:
    ts = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    return f"{m['step']}\t{m['L_t']:.9g}\t{m['L_v']:.9g}\t{m['L_total']:.9g}\t{ts}\n"


def _snapshot(cfg: RunConfig) -> dict:
    return {"text": cfg.to_text()}


def _config_from_snapshot(snap: dict) -> RunConfig:
    from .config import loads
    return loads(snap["text"])


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    spec = cfg.synth_spec()
    if args.seed is not None:
        from dataclasses import replace
        spec = replace(spec, seed=args.seed)
    pairs = data.gen_corpus(spec)
    data.write_dataset(pairs, args.out)
    print(f"wrote {len(pairs)} pairs ({spec.T_frames} frames) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    pairs = [p.as_training() for p in _read_pairs(args.data)]
    log_path = args.log or (os.fspath(args.out) + ".log.tsv")
    params = opt = None
    if args.resume:
        ck = ckpt.load(args.resume)
        ckpt.check_shapes(ck.params, dn.param_shapes(cfg.model()))
        if ck.opt is None:
            raise ckpt.CheckpointError("checkpoint has no optimizer state to resume from")
        params, opt = ck.params, ck.opt
    try:
        runner.check_pairs(cfg, pairs)
    except ValueError as e:
        raise DataError(str(e)) from None

    append = bool(args.resume) and os.path.exists(log_path)
    with open(log_path, "a" if append else "w", encoding="utf-8") as log, \
            numeric.precision(cfg["run.precision"]):
        if not append:
            log.write(LOG_HEADER)
        on_step = lambda m: log.write(_log_line(m))  # noqa: E731
        params, opt, hist = runner.train_run(cfg, pairs, params, opt, on_step)
    ckpt.save(ckpt.Checkpoint(params, opt, _snapshot(cfg), {"seed": cfg["run.seed"], "step": opt.step}), args.out)
    last = hist[-1] if hist else None
    msg = f"step {opt.step}" + (f", L_t {last['L_t']:.4g}" if last else "")
    print(f"trained to {msg}; checkpoint {args.out}, log {log_path}")
    return EXIT_OK


def write_trace(path, seqs) -> None:
    lines = []
    for k, seq in enumerate(seqs):
        if k:
            lines.append("")
        lines.extend(" ".join(f"{v:.8g}" for v in row) for row in np.asarray(seq, dtype=np.float64))
    data._atomic_write(path, ("\n".join(lines) + "\n").encode("utf-8"))


def cmd_sample(args) -> int:
    cfg = _config(args)
    ck = ckpt.load(args.checkpoint)
    model = cfg.model()
    ckpt.check_shapes(ck.params, dn.param_shapes(model))
    src = _read_pairs(args.data)
    b0_src = _read_pairs(args.beta0_from) if args.beta0_from else src
    if len(b0_src) != len(src):
        raise DataError("beta0 source and audio source hold different pair counts")
    idx = range(len(src)) if args.pair is None else [args.pair]
    if args.pair is not None and not 0 <= args.pair < len(src):
        raise DataError(f"pair {args.pair} outside 0..{len(src) - 1}")
    dtype = np.float64 if cfg["run.precision"] == "f64" else np.float32
    params = {k: v.astype(dtype) for k, v in ck.params.items()}
    conds = [(b0_src[i].expression[0], src[i].audio) for i in idx]
    with numeric.precision(cfg["run.precision"]):
        seqs = runner.sample_run(cfg, params, conds)
    out_pairs = [data.SynthPair(src[i].audio, s.astype(np.float32), src[i].blink) for i, s in zip(idx, seqs)]
    data.write_dataset(out_pairs, args.out)
    write_trace(os.fspath(args.out) + ".txt", seqs)
    n = src[0].audio.shape[0]
    summary = (f"seed\t{cfg['run.seed']}\nmode\t{cfg['sampler.mode']}\n"
               f"phase_order\t{cfg['phase.order']}\nphase_enabled\t{cfg['phase.enabled']}\n"
               f"t_threshold\t{cfg['phase.t_threshold']}\nschedule_T\t{cfg['schedule.T']}\n"
               f"pairs\t{len(seqs)}\nframes\t{n}\n"
               f"windows\t{len(window_starts(n, model.frames, cfg['sampler.overlap']))}\n")
    data._atomic_write(os.fspath(args.out) + ".summary", summary.encode("utf-8"))
    print(summary, end="")
    return EXIT_OK


def eval_report(gen: List[data.SynthPair], ref: List[data.SynthPair]) -> str:
    if len(gen) != len(ref):
        raise DataError(f"generated file has {len(gen)} pairs, reference has {len(ref)}")
    lines = ["pair\tmse\tvelocity_mse\tjitter_generated\tjitter_reference"]
    rows = []
    for i, (g, r) in enumerate(zip(gen, ref)):
        if g.expression.shape != r.expression.shape:
            raise DataError(f"pair {i}: shape {g.expression.shape} vs {r.expression.shape}")
        row = (metrics.mse(g.expression, r.expression), metrics.velocity_mse(g.expression, r.expression),
               metrics.jitter(g.expression), metrics.jitter(r.expression))
        rows.append(row)
        lines.append(f"{i}\t" + "\t".join(f"{v:.6g}" for v in row))
    mean = np.mean(rows, axis=0)
    lines.append("mean\t" + "\t".join(f"{v:.6g}" for v in mean))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    report = eval_report(_read_pairs(args.generated), _read_pairs(args.reference))
    if args.basis:
        from . import blink
        basis = blink.toy_basis()
        alpha = np.zeros(basis.U_id.shape[2])
        gen = _read_pairs(args.generated)
        dist = [blink.eye_closure_distance(blink.assemble_shape(alpha, row.astype(np.float64), basis))
                for row in gen[0].expression]
        report += "blink_distance\t" + " ".join(f"{d:.6g}" for d in dist) + "\n"
    if args.out:
        data._atomic_write(args.out, report.encode("utf-8"))
    print(report, end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck
    results = gradcheck.run(step=args.step)
    report = gradcheck.format_report(results)
    failed = [r for r in results if not r.passed]
    worst = max(results, key=lambda r: r.report.max_relative_error)
    report += (f"max relative error {worst.report.max_relative_error:.3e} "
               f"({worst.module} {worst.block}); {len(failed)} block(s) failing\n")
    if args.out:
        data._atomic_write(args.out, report.encode("utf-8"))
    print(report, end="")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from . import ablation
    cfg = load_config(args.spec)
    if args.seed is not None:
        cfg = cfg.updated({"ablation.seeds": (args.seed,)})
    if args.precision is not None:
        cfg = cfg.updated({"run.precision": args.precision})
    report = ablation.run_ablation(cfg, progress=lambda s: print(s, file=sys.stderr))
    text = ablation.format_report(report)
    data._atomic_write(args.out, text.encode("utf-8"))
    print(text, end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="modit", description="Conditional diffusion over expression coefficients.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="key = value run configuration")
        sp.add_argument("--seed", type=int, help="overrides run.seed")
        sp.add_argument("--precision", choices=("f32", "f64"), help="overrides run.precision")
        return sp

    sp = common(sub.add_parser("gen-data", help="write a synthetic dataset"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = common(sub.add_parser("train", help="train the noise predictor"))
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--log", help="metrics log (default: <out>.log.tsv)")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.set_defaults(fn=cmd_train)

    sp = common(sub.add_parser("sample", help="generate sequences from a checkpoint"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset supplying audio (and beta0 unless --beta0-from)")
    sp.add_argument("--beta0-from", help="dataset whose first expression frames supply beta0")
    sp.add_argument("--pair", type=int, help="only this pair index")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_sample)

    sp = common(sub.add_parser("eval", help="compare generated and reference sequences"), config_required=False)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--basis", action="store_true", help="add the toy eyelid distance curve")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_eval)

    sp = common(sub.add_parser("gradcheck", help="finite-difference audit of all backward passes"),
                config_required=False)
    sp.add_argument("--step", type=float, default=1e-4)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_gradcheck)

    sp = sub.add_parser("ablate", help="run the ablation variants and write a report")
    sp.add_argument("--spec", required=True, help="run configuration with ablation.* keys")
    sp.add_argument("--seed", type=int, help="run a single seed")
    sp.add_argument("--precision", choices=("f32", "f64"))
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, data.DatasetError, ckpt.CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as e:
        print(f"numeric abort ({e.component}, step {e.step}): {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SampleError as e:
        if isinstance(e.cause, NumericAbort):
            print(f"numeric abort in request {e.index}: {e.cause}", file=sys.stderr)
            return EXIT_NUMERIC
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
