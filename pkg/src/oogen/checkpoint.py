"""Binary checkpoint format.

Layout (all integers little-endian)::

    8 bytes   magic b"OOGENCKP"
    u32       format version
    u64       metadata length n
    n bytes   metadata, UTF-8 JSON (sorted keys)
    ...       payload: float64 little-endian, row-major tensors

Payload order is the model's canonical tensor order (``param_shapes``),
followed, when optimizer state is stored, by the first-moment tensors and then
the second-moment tensors of every name listed in ``optimizer.names``.
The metadata carries the payload length and its SHA-256.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelConfig, ModelParams, param_shapes
from .train import Adam

MAGIC = b"OOGENCKP"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<8sIQ")


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    params: ModelParams
    vocab_hash: str
    hyperparams: dict = field(default_factory=dict)
    optimizer: Adam | None = None
    extra: dict = field(default_factory=dict)


def _le(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    params = ckpt.params
    chunks = [_le(params[name]) for name in params.names()]
    opt_meta = None
    if ckpt.optimizer is not None:
        opt = ckpt.optimizer
        names = [n for n in params.names() if n in opt.m]
        chunks += [_le(opt.m[n]) for n in names] + [_le(opt.v[n]) for n in names]
        opt_meta = {"names": names, "t": opt.t, "lr": opt.lr, "beta1": opt.beta1, "beta2": opt.beta2,
                    "eps": opt.eps, "sparse": sorted(opt.sparse)}
    payload = b"".join(chunks)
    meta = {
        "format_version": FORMAT_VERSION,
        "model": params.config.to_dict(),
        "tensors": [{"name": n, "shape": list(params[n].shape)} for n in params.names()],
        "vocabulary_hash": ckpt.vocab_hash,
        "hyperparams": ckpt.hyperparams,
        "optimizer": opt_meta,
        "extra": ckpt.extra,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return _HEADER.pack(MAGIC, FORMAT_VERSION, len(blob)) + blob + payload


def decode_checkpoint(data: bytes, vocab_hash: str | None = None) -> Checkpoint:
    if len(data) < _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    magic, version, n_meta = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    start = _HEADER.size + n_meta
    if len(data) < start:
        raise CheckpointError("truncated checkpoint metadata")
    try:
        meta = json.loads(data[_HEADER.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from None
    payload = data[start:]
    if len(payload) != meta["payload_bytes"]:
        raise CheckpointError(f"checkpoint payload has {len(payload)} bytes, expected {meta['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != meta["payload_sha256"]:
        raise CheckpointError("checkpoint payload checksum mismatch")
    if vocab_hash is not None and meta["vocabulary_hash"] != vocab_hash:
        raise CheckpointError("checkpoint was trained on a different vocabulary")

    config = ModelConfig(**meta["model"])
    shapes = param_shapes(config)
    listed = [(t["name"], tuple(t["shape"])) for t in meta["tensors"]]
    if listed != list(shapes.items()):
        raise CheckpointError("tensor table does not match the model configuration")
    offset = 0

    def read(shape):
        nonlocal offset
        n = int(np.prod(shape)) * 8
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        offset += n
        return arr.astype(np.float64)

    params = ModelParams(config, {name: read(shape) for name, shape in shapes.items()})
    opt = None
    if meta["optimizer"] is not None:
        om = meta["optimizer"]
        opt = Adam(lr=om["lr"], beta1=om["beta1"], beta2=om["beta2"], eps=om["eps"], sparse=om["sparse"])
        opt.t = om["t"]
        opt.m = {n: read(shapes[n]) for n in om["names"]}
        opt.v = {n: read(shapes[n]) for n in om["names"]}
    return Checkpoint(params, meta["vocabulary_hash"], meta["hyperparams"], opt, meta.get("extra", {}))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write atomically: a partial file never replaces an existing checkpoint."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, vocab_hash: str | None = None) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes(), vocab_hash)
