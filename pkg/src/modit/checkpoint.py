"""Binary checkpoint container: JSON manifest plus raw little-endian array payloads.

Layout::

    magic    8 bytes  b"MODITCK\\0"
    version  u32
    mlen     u64      manifest length in bytes
    manifest mlen bytes of UTF-8 JSON
    mhash    32 bytes sha256 of the manifest bytes
    payload  concatenated arrays; offsets in the manifest are relative to here

Arrays keep their in-memory dtype (f32 or f64) so loading is bit-exact in either
precision mode.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from .data import _atomic_write
from .training import OptimizerState

MAGIC = b"MODITCK\0"
VERSION = 1
_HEAD = struct.Struct("<8sIQ")
_DTYPES = {"<f4": np.float32, "<f8": np.float64}


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    opt: Optional[OptimizerState] = None
    config: Dict[str, Any] = field(default_factory=dict)
    rng: Dict[str, int] = field(default_factory=dict)
    extra: Dict[str, np.ndarray] = field(default_factory=dict)


def _dtype_code(a: np.ndarray) -> str:
    if a.dtype == np.float32:
        return "<f4"
    if a.dtype == np.float64:
        return "<f8"
    raise CheckpointError(f"unsupported dtype {a.dtype}")


def encode(ck: Checkpoint) -> bytes:
    groups = [("param", ck.params), ("extra", ck.extra)]
    if ck.opt is not None:
        groups += [("m", ck.opt.m), ("v", ck.opt.v)]
    entries, chunks, off = [], [], 0
    for group, arrays in groups:
        for name in sorted(arrays):
            a = np.asarray(arrays[name])
            code = _dtype_code(a)
            raw = np.ascontiguousarray(a, dtype=code).tobytes()
            entries.append({"group": group, "name": name, "shape": list(a.shape), "dtype": code,
                            "offset": off, "nbytes": len(raw)})
            chunks.append(raw)
            off += len(raw)
    payload = b"".join(chunks)
    manifest = {
        "arrays": entries,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "config": ck.config,
        "rng": ck.rng,
        "optimizer": None if ck.opt is None else {
            "step": ck.opt.step, "lr": ck.opt.lr, "weight_decay": ck.opt.weight_decay,
            "beta1": ck.opt.beta1, "beta2": ck.opt.beta2, "eps": ck.opt.eps},
    }
    mbytes = json.dumps(manifest, sort_keys=True).encode("utf-8")
    return _HEAD.pack(MAGIC, VERSION, len(mbytes)) + mbytes + hashlib.sha256(mbytes).digest() + payload


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < _HEAD.size:
        raise CheckpointError("file too short for a checkpoint header")
    magic, version, mlen = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"checkpoint version {version}, reader supports {VERSION}")
    start = _HEAD.size
    mbytes = buf[start:start + mlen]
    digest = buf[start + mlen:start + mlen + 32]
    if len(mbytes) != mlen or len(digest) != 32:
        raise CheckpointError("truncated manifest")
    if hashlib.sha256(mbytes).digest() != digest:
        raise CheckpointError("manifest hash mismatch")
    manifest = json.loads(mbytes.decode("utf-8"))
    payload = buf[start + mlen + 32:]
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError("payload hash mismatch")
    groups: Dict[str, Dict[str, np.ndarray]] = {"param": {}, "extra": {}, "m": {}, "v": {}}
    for e in manifest["arrays"]:
        if e["dtype"] not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {e['dtype']} for {e['name']}")
        count = int(np.prod(e["shape"], dtype=np.int64))
        if e["offset"] + e["nbytes"] > len(payload):
            raise CheckpointError(f"array {e['name']} runs past the payload")
        a = np.frombuffer(payload, dtype=e["dtype"], count=count, offset=e["offset"])
        groups[e["group"]][e["name"]] = a.astype(_DTYPES[e["dtype"]]).reshape(e["shape"])
    opt = None
    if manifest["optimizer"] is not None:
        o = manifest["optimizer"]
        opt = OptimizerState(groups["m"], groups["v"], o["step"], o["lr"], o["weight_decay"],
                             o["beta1"], o["beta2"], o["eps"])
    return Checkpoint(groups["param"], opt, manifest["config"], manifest["rng"], groups["extra"])


def save(ck: Checkpoint, path) -> None:
    _atomic_write(path, encode(ck))


def load(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e.strerror}") from None
    return decode(buf)


def check_shapes(params: Dict[str, np.ndarray], expected: Dict[str, tuple]) -> None:
    """Raise if the stored parameter set does not match a model's shape table."""
    missing = sorted(set(expected) - set(params))
    extra = sorted(set(params) - set(expected))
    if missing or extra:
        raise CheckpointError(f"parameter names differ (missing {missing[:3]}, unexpected {extra[:3]})")
    for k, shape in expected.items():
        if tuple(params[k].shape) != tuple(shape):
            raise CheckpointError(f"{k}: stored shape {params[k].shape}, model expects {tuple(shape)}")
