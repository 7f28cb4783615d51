"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"LCUMINI1"
    u32 config_len, config JSON (UTF-8)
    u32 n_tensors
    per tensor: u16 name_len, name, 4-byte dtype tag b"f32\\0", u8 ndim,
                ndim x u32 dims, u64 offset into payload
    payload: float32 values, row-major, tensors back to back
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .model import LoraAdapter, ModelConfig, ModelWeights
from .tensor import Tensor

MAGIC = b"LCUMINI1"
DTYPE_F32 = b"f32\0"


class CheckpointError(Exception):
    """Checkpoint could not be read."""


class BadMagicError(CheckpointError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


def to_bytes(weights: ModelWeights, train_config: dict | None = None) -> bytes:
    tensors = weights.all_tensors()
    config = {"model": weights.config.to_dict(), "train": train_config, "adapter": weights.adapter_config}
    cfg_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    directory = bytearray()
    payload = bytearray()
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.data, dtype="<f4")
        nb = name.encode("utf-8")
        directory += struct.pack("<H", len(nb)) + nb + DTYPE_F32 + struct.pack("<B", arr.ndim)
        directory += struct.pack(f"<{arr.ndim}I", *arr.shape)
        directory += struct.pack("<Q", len(payload))
        payload += arr.tobytes()
    return (
        MAGIC
        + struct.pack("<I", len(cfg_bytes))
        + cfg_bytes
        + struct.pack("<I", len(tensors))
        + bytes(directory)
        + bytes(payload)
    )


def save_checkpoint(path: str | Path, weights: ModelWeights, train_config: dict | None = None) -> str:
    """Write ``weights`` to ``path``; returns a short content hash used as checkpoint id."""
    blob = to_bytes(weights, train_config)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()[:16]


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError("truncated checkpoint header")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def from_bytes(buf: bytes) -> tuple[ModelWeights, dict]:
    if buf[: len(MAGIC)] != MAGIC:
        raise BadMagicError("not an LCUMINI1 checkpoint (bad magic)")
    r = _Reader(buf)
    r.take(len(MAGIC))
    (cfg_len,) = r.unpack("<I")
    try:
        config = json.loads(r.take(cfg_len).decode("utf-8"))
        model_cfg = ModelConfig(**config["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptCheckpointError(f"unreadable config block: {exc}") from exc
    (n,) = r.unpack("<I")
    entries = []
    for _ in range(n):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8", errors="strict")
        if r.take(4) != DTYPE_F32:
            raise CorruptCheckpointError(f"tensor {name!r}: unsupported dtype tag")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        (offset,) = r.unpack("<Q")
        entries.append((name, shape, offset, 4 * int(np.prod(shape, dtype=np.int64))))
    payload = buf[r.pos :]
    spans = sorted((off, off + nb, name) for name, _, off, nb in entries)
    prev_end = 0
    for lo, hi, name in spans:
        if lo < prev_end:
            raise CorruptCheckpointError(f"tensor {name!r} overlaps its predecessor")
        if hi > len(payload):
            raise CorruptCheckpointError(f"tensor {name!r} runs past end of payload (truncated)")
        prev_end = hi
    if prev_end != len(payload):
        raise CorruptCheckpointError("trailing bytes after payload")

    tensors = {}
    for name, shape, off, nb in entries:
        arr = np.frombuffer(payload, dtype="<f4", count=nb // 4, offset=off).reshape(shape).astype(np.float32)
        tensors[name] = Tensor(arr, requires_grad=True)

    adapter_cfg = config.get("adapter")
    adapters = {}
    params = {}
    for name, t in tensors.items():
        if name.startswith("lora.") and name.endswith(".down"):
            target = name[len("lora.") : -len(".down")]
            adapters[target] = LoraAdapter(t, tensors[f"lora.{target}.up"], adapter_cfg["alpha"] / adapter_cfg["rank"])
        elif not name.startswith("lora."):
            params[name] = t
    if adapters:
        for t in params.values():
            t.requires_grad = False
    return ModelWeights(model_cfg, params, adapters, adapter_cfg), config


def load_checkpoint(path: str | Path) -> tuple[ModelWeights, dict]:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(buf)
