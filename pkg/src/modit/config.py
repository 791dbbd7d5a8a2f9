"""Flat ``key = value`` run configuration with a typed, range-checked key registry."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterable, Mapping, Optional, Tuple

from .attention import BIAS_TARGETS, MASK_MODES, ORDERS, PhaseConfig
from .denoiser import DenoiserConfig
from .schedule import build_schedule
from .training import LossWeights


class ConfigError(ValueError):
    def __init__(self, key: Optional[str], message: str):
        super().__init__(f"{key}: {message}" if key else message)
        self.key = key


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _targets(s: str) -> Tuple[str, ...]:
    items = tuple(x.strip() for x in s.split(",") if x.strip())
    bad = [x for x in items if x not in BIAS_TARGETS]
    if bad:
        raise ValueError(f"unknown bias targets {bad}; allowed {sorted(BIAS_TARGETS)}")
    return items


def _int_list(s: str) -> Tuple[int, ...]:
    items = tuple(int(x) for x in s.split(",") if x.strip())
    if not items:
        raise ValueError("empty list")
    return items


def _str_list(s: str) -> Tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    check: Callable[[Any], bool] = lambda v: True
    rule: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _prob(v):
    return 0 < v < 1


def _one_of(options: Iterable[str]):
    opts = tuple(options)
    return Key(str, opts[0], lambda v: v in opts, f"one of {', '.join(opts)}")


VARIANTS = ("full", "no_beta0", "no_bias_injection", "no_temporal_revision", "no_velocity_loss")

REGISTRY: Dict[str, Key] = {
    "run.seed": Key(int, 0, _nonneg, ">= 0"),
    "run.precision": Key(str, "f32", lambda v: v in ("f32", "f64"), "f32 or f64"),

    "schedule.T": Key(int, 1000, _pos, ">= 1"),
    "schedule.beta_start": Key(float, 1e-4, _prob, "in (0, 1)"),
    "schedule.beta_end": Key(float, 0.02, _prob, "in (0, 1)"),

    "model.width": Key(int, 64, _pos, ">= 1"),
    "model.ffn_width": Key(int, 128, _pos, ">= 1"),
    "model.heads": Key(int, 4, _pos, ">= 1"),
    "model.blocks": Key(int, 1, _pos, ">= 1"),
    "model.frames": Key(int, 12, _pos, ">= 1"),
    "model.coeff_dim": Key(int, 64, _pos, ">= 1"),
    "model.audio_dim": Key(int, 16, _pos, ">= 1"),
    "model.latent_dim": Key(int, 8, _pos, ">= 1"),
    "model.f_hidden": Key(int, 16, _pos, ">= 1"),
    "model.use_beta0": Key(_bool, True),
    "model.temporal_revision": Key(_bool, True),

    "phase.enabled": Key(_bool, True),
    "phase.t_threshold": Key(int, 500, _pos, ">= 1"),
    "phase.order": _one_of(ORDERS),
    "phase.targets": Key(_targets, ("cross",), lambda v: len(v) > 0, "non-empty"),
    "phase.bandwidth": Key(int, 1, _nonneg, ">= 0"),
    "phase.sigma": Key(float, 2.0, _pos, "> 0"),
    "phase.mode": _one_of(MASK_MODES),

    "train.lr": Key(float, 1e-4, _nonneg, ">= 0"),
    "train.steps": Key(int, 2000, _nonneg, ">= 0"),
    "train.batch_size": Key(int, 4, _pos, ">= 1"),
    "train.noise_draws": Key(int, 1, _pos, ">= 1"),
    "train.weight_decay": Key(float, 0.01, _nonneg, ">= 0"),
    "train.lambda_t": Key(float, 10.0, _nonneg, ">= 0"),
    "train.lambda_read": Key(float, 0.2, _nonneg, ">= 0"),
    "train.lambda_lks": Key(float, 0.1, _nonneg, ">= 0"),
    "train.lambda_v": Key(float, 0.1, _nonneg, ">= 0"),

    "sampler.mode": Key(str, "ddim", lambda v: v in ("ddim", "ddpm"), "ddim or ddpm"),
    "sampler.resample_inner": Key(int, 0, _nonneg, ">= 0"),
    "sampler.overlap": Key(int, 4, _nonneg, ">= 0"),
    "sampler.clip_x0": Key(float, 0.0, _nonneg, ">= 0 (0 disables)"),

    "data.seed": Key(int, 0, _nonneg, ">= 0"),
    "data.num_pairs": Key(int, 4, _pos, ">= 1"),
    "data.frames": Key(int, 12, _pos, ">= 1"),
    "data.audio_dim": Key(int, 16, _pos, ">= 1"),
    "data.coeff_dim": Key(int, 64, _pos, ">= 1"),
    "data.noise_std": Key(float, 0.0, _nonneg, ">= 0"),
    "data.ar_coef": Key(float, 0.9, lambda v: -1 < v < 1, "in (-1, 1)"),

    "ablation.variants": Key(_str_list, VARIANTS, lambda v: len(v) > 0 and all(x in VARIANTS for x in v),
                             f"comma list drawn from {', '.join(VARIANTS)}"),
    "ablation.seeds": Key(_int_list, (0, 1, 2, 3, 4), lambda v: all(s >= 0 for s in v), "non-negative ints"),
    "ablation.train_pairs": Key(int, 8, _pos, ">= 1"),
    "ablation.heldout_pairs": Key(int, 4, _pos, ">= 1"),
}


class RunConfig(Mapping[str, Any]):
    """Validated view over the registry; every key has a value (explicit or default)."""

    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self._v = {k: spec.default for k, spec in REGISTRY.items()}
        for k, v in (values or {}).items():
            self._set(k, v)
        self._cross_check()

    def _set(self, key: str, value: Any) -> None:
        if key not in REGISTRY:
            raise ConfigError(key, "unknown configuration key")
        spec = REGISTRY[key]
        try:
            v = spec.parse(value) if isinstance(value, str) else value
            if spec.parse is int and (isinstance(v, bool) or int(v) != v):
                raise ValueError(f"not an integer: {value!r}")
            if spec.parse in (int, float):
                v = spec.parse(v)
        except (TypeError, ValueError) as e:
            raise ConfigError(key, f"cannot parse {value!r}: {e}") from None
        if not spec.check(v):
            raise ConfigError(key, f"value {v!r} out of range (expected {spec.rule})")
        self._v[key] = v

    def _cross_check(self) -> None:
        v = self._v
        if v["schedule.beta_start"] > v["schedule.beta_end"]:
            raise ConfigError("schedule.beta_start", "must not exceed schedule.beta_end")
        if v["phase.t_threshold"] > v["schedule.T"]:
            raise ConfigError("phase.t_threshold", f"must not exceed schedule.T ({v['schedule.T']})")
        if v["model.width"] % 2:
            raise ConfigError("model.width", "must be even")
        if v["model.width"] % v["model.heads"]:
            raise ConfigError("model.width", "must be divisible by model.heads")
        if v["sampler.overlap"] >= v["model.frames"]:
            raise ConfigError("sampler.overlap", "must be smaller than model.frames")
        if v["model.frames"] < 2 and v["train.lambda_v"] > 0:
            raise ConfigError("train.lambda_v", "velocity loss needs model.frames >= 2")

    # Mapping protocol
    def __getitem__(self, key):
        return self._v[key]

    def __iter__(self):
        return iter(self._v)

    def __len__(self):
        return len(self._v)

    def replace(self, **updates) -> "RunConfig":
        """Copy with overrides; keys use ``__`` in place of dots, e.g. ``train__lr``."""
        vals = dict(self._v)
        vals.update({k.replace("__", "."): v for k, v in updates.items()})
        return RunConfig(vals)

    def updated(self, values: Mapping[str, Any]) -> "RunConfig":
        vals = dict(self._v)
        vals.update(values)
        return RunConfig(vals)

    # typed views
    def model(self) -> DenoiserConfig:
        v = self._v
        return DenoiserConfig(width=v["model.width"], ffn_width=v["model.ffn_width"], heads=v["model.heads"],
                              blocks=v["model.blocks"], frames=v["model.frames"], coeff_dim=v["model.coeff_dim"],
                              audio_dim=v["model.audio_dim"], latent_dim=v["model.latent_dim"],
                              f_hidden=v["model.f_hidden"], use_beta0=v["model.use_beta0"],
                              temporal_revision=v["model.temporal_revision"])

    def schedule(self):
        return build_schedule(self._v["schedule.T"], self._v["schedule.beta_start"], self._v["schedule.beta_end"])

    def phase(self) -> Optional[PhaseConfig]:
        v = self._v
        return PhaseConfig(t_threshold=v["phase.t_threshold"], order=v["phase.order"],
                           bias_targets=frozenset(v["phase.targets"]), bandwidth=v["phase.bandwidth"],
                           sigma=v["phase.sigma"], mode=v["phase.mode"], enabled=v["phase.enabled"])

    def loss_weights(self) -> LossWeights:
        v = self._v
        return LossWeights(v["train.lambda_t"], v["train.lambda_read"], v["train.lambda_lks"], v["train.lambda_v"])

    def synth_spec(self):
        from .data import SynthSpec
        v = self._v
        return SynthSpec(seed=v["data.seed"], num_pairs=v["data.num_pairs"], T_frames=v["data.frames"],
                         audio_dim=v["data.audio_dim"], coeff_dim=v["data.coeff_dim"],
                         ar_coef=v["data.ar_coef"], noise_std=v["data.noise_std"])

    def sampler(self):
        from .sampler import SamplerConfig
        v = self._v
        clip = v["sampler.clip_x0"] or None
        return SamplerConfig(mode=v["sampler.mode"], phase=self.phase(), resample_inner=v["sampler.resample_inner"],
                             seed=v["run.seed"], overlap=v["sampler.overlap"], clip_x0=clip)

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(self._v[k])}\n" for k in sorted(self._v))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_text(text: str) -> Dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; blank lines ignored; duplicates rejected."""
    out: Dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"line {n}: expected 'key = value', got {raw.strip()!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        if not k:
            raise ConfigError(None, f"line {n}: empty key")
        if k in out:
            raise ConfigError(k, f"duplicate key on line {n}")
        out[k] = v
    return out


def loads(text: str) -> RunConfig:
    return RunConfig(parse_text(text))


def load(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as e:
        raise ConfigError(None, f"cannot read config {path}: {e.strerror}") from None
    return loads(text)
