"""Synthetic paired corpus with a known audio -> expression mapping, and its file format.

Dataset file layout (all little-endian)::

    offset  size  field
    0       8     magic  b"MODITDS\\0"
    8       4     version (u32, currently 1)
    12      4     num_pairs (u32)
    16      4     frames T (u32)
    20      4     audio_dim A (u32)
    24      4     coeff_dim D (u32)
    28      4     reserved, zero
    32      ...   num_pairs records, each: audio f32[T*A], expression f32[T*D], blink f32[T]
"""
from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .training import TrainingPair

MAGIC = b"MODITDS\0"
VERSION = 1
_HEADER = struct.Struct("<8sIIIIII")


class DatasetError(Exception):
    pass


class CorruptHeaderError(DatasetError):
    pass


class VersionMismatchError(DatasetError):
    pass


class TruncatedRecordError(DatasetError):
    def __init__(self, pair_index: int, message: str):
        super().__init__(message)
        self.pair_index = pair_index


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    num_pairs: int = 4
    T_frames: int = 12
    audio_dim: int = 16
    coeff_dim: int = 64
    ar_coef: float = 0.9
    noise_std: float = 0.0
    kernel: Tuple[float, ...] = (0.25, 0.5, 0.25)

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not -1.0 < self.ar_coef < 1.0:
            raise ValueError("ar_coef must lie in (-1, 1)")
        if len(self.kernel) % 2 != 1:
            raise ValueError("smoothing kernel needs odd length")


@dataclass
class SynthPair:
    audio: np.ndarray       # (T, A)
    expression: np.ndarray  # (T, D)
    blink: np.ndarray       # (T,)

    def as_training(self) -> TrainingPair:
        return TrainingPair(beta0=self.expression[0].copy(), audio=self.audio, x0=self.expression)


def filter_bank(spec: SynthSpec) -> np.ndarray:
    """Fixed ``audio_dim x coeff_dim`` linear map, determined by the seed alone."""
    rng = np.random.default_rng([spec.seed, 0])
    return rng.standard_normal((spec.audio_dim, spec.coeff_dim)) / np.sqrt(spec.audio_dim)


def smooth(x: np.ndarray, kernel: Sequence[float]) -> np.ndarray:
    """Centered temporal convolution with edge-replicate padding."""
    k = np.asarray(kernel, dtype=np.float64)
    r = len(k) // 2
    padded = np.concatenate([np.repeat(x[:1], r, axis=0), x, np.repeat(x[-1:], r, axis=0)])
    out = np.zeros_like(x, dtype=np.float64)
    for i, w in enumerate(k):
        out += w * padded[i:i + len(x)]
    return out


def expression_from_audio(spec: SynthSpec, audio: np.ndarray) -> np.ndarray:
    """Noise-free ground-truth expression for an audio-latent sequence."""
    return smooth(np.asarray(audio, dtype=np.float64) @ filter_bank(spec), spec.kernel)


def ar1_sequence(rng: np.random.Generator, T: int, dim: int, coef: float) -> np.ndarray:
    out = np.empty((T, dim))
    out[0] = rng.standard_normal(dim)
    innov = np.sqrt(1.0 - coef * coef)
    for t in range(1, T):
        out[t] = coef * out[t - 1] + innov * rng.standard_normal(dim)
    return out


def blink_track(rng: np.random.Generator, T: int) -> np.ndarray:
    """One or two raised-cosine eye-closure pulses, clamped to [0, 1]."""
    frames = np.arange(T, dtype=np.float64)
    track = np.zeros(T)
    for _ in range(int(rng.integers(1, 3))):
        centre = rng.uniform(0, T - 1)
        half = rng.uniform(1.5, 3.0)
        amp = rng.uniform(0.6, 1.0)
        d = np.abs(frames - centre)
        track += np.where(d < half, amp * 0.5 * (1.0 + np.cos(np.pi * d / half)), 0.0)
    return np.clip(track, 0.0, 1.0)


def gen_pair(spec: SynthSpec, index: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 0 <= index < spec.num_pairs:
        raise IndexError(f"pair index {index} outside 0..{spec.num_pairs - 1}")
    rng = np.random.default_rng([spec.seed, 1, index])
    audio = ar1_sequence(rng, spec.T_frames, spec.audio_dim, spec.ar_coef)
    expression = expression_from_audio(spec, audio)
    if spec.noise_std > 0:
        expression = expression + spec.noise_std * rng.standard_normal(expression.shape)
    # blink uses its own stream so it stays independent of the audio draw
    blink = blink_track(np.random.default_rng([spec.seed, 2, index]), spec.T_frames)
    return audio, expression, blink


def gen_corpus(spec: SynthSpec, start: int = 0, count: int | None = None) -> List[SynthPair]:
    count = spec.num_pairs - start if count is None else count
    out = []
    for i in range(start, start + count):
        a, e, b = gen_pair(spec, i)
        out.append(SynthPair(a.astype(np.float32), e.astype(np.float32), b.astype(np.float32)))
    return out


# ---------------------------------------------------------------- file format

def _atomic_write(path, payload: bytes) -> None:
    path = os.fspath(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)) or ".", prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_dataset(pairs: Sequence[SynthPair]) -> bytes:
    if not pairs:
        raise DatasetError("cannot write an empty dataset")
    T, A = pairs[0].audio.shape
    D = pairs[0].expression.shape[1]
    chunks = [_HEADER.pack(MAGIC, VERSION, len(pairs), T, A, D, 0)]
    for i, p in enumerate(pairs):
        if p.audio.shape != (T, A) or p.expression.shape != (T, D) or p.blink.shape != (T,):
            raise DatasetError(f"pair {i} has shapes inconsistent with pair 0")
        for arr in (p.audio, p.expression, p.blink):
            chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_dataset(pairs: Sequence[SynthPair], path) -> None:
    _atomic_write(path, encode_dataset(pairs))


def decode_dataset(buf: bytes) -> List[SynthPair]:
    if len(buf) < _HEADER.size:
        raise CorruptHeaderError(f"file holds {len(buf)} bytes, header needs {_HEADER.size}")
    magic, version, n, T, A, D, _ = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CorruptHeaderError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"dataset version {version}, reader supports {VERSION}")
    if min(n, T, A, D) == 0:
        raise CorruptHeaderError(f"zero dimension in header (pairs={n}, T={T}, A={A}, D={D})")
    rec = 4 * T * (A + D + 1)
    pairs = []
    off = _HEADER.size
    for i in range(n):
        if off + rec > len(buf):
            raise TruncatedRecordError(i, f"record for pair {i} is truncated "
                                          f"({len(buf) - off} of {rec} bytes present)")
        flat = np.frombuffer(buf, dtype="<f4", count=rec // 4, offset=off).astype(np.float32)
        pairs.append(SynthPair(flat[:T * A].reshape(T, A).copy(),
                               flat[T * A:T * (A + D)].reshape(T, D).copy(),
                               flat[T * (A + D):].copy()))
        off += rec
    if off != len(buf):
        raise CorruptHeaderError(f"{len(buf) - off} trailing bytes after {n} records")
    return pairs


def read_dataset(path) -> List[SynthPair]:
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())
