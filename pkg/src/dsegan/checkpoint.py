"""Binary checkpoint format.

Layout (little-endian)::

    b"DSEG" | version u32 | config_len u32 | config JSON (UTF-8)
    count u32 | count x (name_len u32 | name UTF-8 | tensor)
    step u64 | rng_len u32 | RNG state JSON (UTF-8)

Tensors use the rank/extents/float32 encoding of :func:`tensor_to_bytes`.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from .tensor import Tensor, tensor_from_bytes, tensor_to_bytes

MAGIC = b"DSEG"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: dict
    tensors: dict[str, Tensor]
    step: int
    rng_state: dict


def _blob(data: bytes) -> bytes:
    return struct.pack("<I", len(data)) + data


def to_bytes(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), _blob(json.dumps(ckpt.config, sort_keys=True).encode())]
    parts.append(struct.pack("<I", len(ckpt.tensors)))
    for name, t in ckpt.tensors.items():
        parts.append(_blob(name.encode("utf-8")))
        parts.append(tensor_to_bytes(t))
    parts.append(struct.pack("<Q", ckpt.step))
    parts.append(_blob(json.dumps(ckpt.rng_state).encode()))
    return b"".join(parts)


def from_bytes(buf: bytes) -> Checkpoint:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a DSEG checkpoint")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 8

    def blob() -> bytes:
        nonlocal pos
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        data = buf[pos : pos + n]
        pos += n
        return data

    config = json.loads(blob())
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        name = blob().decode("utf-8")
        tensors[name], pos = tensor_from_bytes(buf, pos)
    (step,) = struct.unpack_from("<Q", buf, pos)
    pos += 8
    rng_state = json.loads(blob())
    return Checkpoint(config, tensors, int(step), rng_state)


def save(path, ckpt: Checkpoint):
    """Write atomically so an interrupted save never clobbers the previous checkpoint."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    return from_bytes(Path(path).read_bytes())
