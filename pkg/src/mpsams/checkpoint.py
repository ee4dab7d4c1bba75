"""Binary weight checkpoints.

Layout (all integers little-endian unsigned)::

    b"MPSW" | version u32 | tensor count u32
    per tensor: name length u32 | UTF-8 name | rank u32 | dims u64 * rank | float32 LE data
    checksum u64 = sum of every tensor data byte, mod 2**64
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelWeights, NetConfig

MAGIC = b"MPSW"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def encode(tensors: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    checksum = 0
    for name, value in tensors.items():
        # ascontiguousarray would promote 0-d tensors to shape (1,)
        arr = np.asarray(value, dtype="<f4").copy(order="C")
        raw_name = name.encode("utf-8")
        data = arr.tobytes()
        checksum += int(np.frombuffer(data, dtype=np.uint8).sum(dtype=np.uint64))
        parts += [
            struct.pack("<I", len(raw_name)),
            raw_name,
            struct.pack("<I", arr.ndim),
            struct.pack(f"<{arr.ndim}Q", *arr.shape),
            data,
        ]
    parts.append(struct.pack("<Q", checksum % 2**64))
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError("truncated checkpoint")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise CheckpointError("bad magic bytes")
    version, count = struct.unpack("<II", take(8))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    checksum = 0
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = bytes(take(name_len)).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank))
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        data = bytes(take(4 * size))
        checksum += int(np.frombuffer(data, dtype=np.uint8).sum(dtype=np.uint64))
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
    (stored,) = struct.unpack("<Q", take(8))
    if pos != len(view):
        raise CheckpointError("trailing bytes after checksum")
    if stored != checksum % 2**64:
        raise CheckpointError("checksum mismatch")
    return out


def write_checkpoint(path: str | Path, weights: ModelWeights | Mapping[str, np.ndarray]) -> Path:
    tensors = weights.numpy() if isinstance(weights, ModelWeights) else weights
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(tensors))
    return path


def read_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def load_weights(path: str | Path, config: NetConfig, patch_size: int | None = None) -> ModelWeights:
    """Read a checkpoint and check it against the network ``config`` describes."""
    import torch

    from .model import build_module

    tensors = read_checkpoint(path)
    expected = build_module(config).state_dict()
    bad = [n for n in expected if n not in tensors or tuple(tensors[n].shape) != tuple(expected[n].shape)]
    extra = [n for n in tensors if n not in expected]
    if bad or extra:
        raise CheckpointError(f"{path}: checkpoint does not match network config (mismatched: {bad[:3]}, unexpected: {extra[:3]})")
    return ModelWeights({n: torch.from_numpy(tensors[n].copy()) for n in expected}, config, patch_size)
