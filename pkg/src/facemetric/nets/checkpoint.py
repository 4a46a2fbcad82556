"""Binary checkpoints for :class:`EmbeddingNet` weights and buffers.

Layout (little-endian): ``FMCK`` magic, u32 format version, u32 metadata
length plus UTF-8 JSON metadata, u32 tensor count, then per tensor a u32
name length, the name, u32 rank, u64 dims and the float64 payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .builders import EmbeddingNet, build

MAGIC = b"FMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: EmbeddingNet, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    meta = {
        "arch": net.arch,
        "input_shape": list(net.input_shape),
        "embedding_dim": net.embedding_dim,
        "seed": net.seed,
        "config": net.config,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    state = net.state_dict()
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob, struct.pack("<I", len(state))]
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        key = name.encode()
        parts += [struct.pack("<I", len(key)), key, struct.pack("<I", arr.ndim),
                  struct.pack(f"<{arr.ndim}Q", *arr.shape), arr.tobytes()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(parts))
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Metadata and tensors of a checkpoint file."""
    buf = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    if take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, meta_len = struct.unpack("<II", take(8))
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    meta = json.loads(take(meta_len))
    (count,) = struct.unpack("<I", take(4))
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode()
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return meta, tensors


def load_checkpoint(path) -> tuple[EmbeddingNet, dict]:
    """Rebuild the network recorded in ``path`` and load its weights."""
    meta, tensors = read_checkpoint(path)
    net = build(meta["arch"], tuple(meta["input_shape"]), meta["embedding_dim"], meta["seed"], **meta["config"])
    net.load_state_dict(tensors)
    return net, meta.get("extra", {})
