"""Binary checkpoint format shared by every module.

Layout: magic "X3DC", format version u32 LE, entry count u32 LE, then per
parameter: name length u16 LE + UTF-8 name, rank u8, extents u32 LE each,
data as little-endian float32. Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterable

import numpy as np

from .optim import Parameter
from .tensor import Tensor

MAGIC = b"X3DC"
FORMAT_VERSION = 1
_MAX_RANK = 8


class CheckpointError(RuntimeError):
    """Checkpoint file is missing structure or fails integrity validation."""


def save_checkpoint(path, params: Iterable[Parameter]) -> None:
    entries = list(params)
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<I", FORMAT_VERSION)
    blob += struct.pack("<I", len(entries))
    for p in entries:
        name = p.name.encode("utf-8")
        data = p.tensor.data
        if data.dtype != np.float32:
            raise CheckpointError(f"parameter {p.name!r} is not float32")
        blob += struct.pack("<H", len(name))
        blob += name
        blob += struct.pack("<B", data.ndim)
        for extent in data.shape:
            blob += struct.pack("<I", extent)
        blob += np.ascontiguousarray(data, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise CheckpointError(f"corrupt checkpoint: truncated while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("corrupt checkpoint: bad magic")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"corrupt checkpoint: unsupported format version {version}")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    out: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt checkpoint: name is not UTF-8") from exc
        (rank,) = struct.unpack("<B", take(1, "rank"))
        if rank > _MAX_RANK:
            raise CheckpointError(f"corrupt checkpoint: rank {rank} out of range")
        shape = tuple(struct.unpack("<I", take(4, "extent"))[0] for _ in range(rank))
        size = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if any(e == 0 for e in shape):
            raise CheckpointError(f"corrupt checkpoint: zero extent in {name!r}")
        data = np.frombuffer(take(4 * size, f"data of {name!r}"), dtype="<f4")
        if name in out:
            raise CheckpointError(f"corrupt checkpoint: duplicate parameter {name!r}")
        out[name] = data.reshape(shape).astype(np.float32)
    if pos != len(raw):
        raise CheckpointError("corrupt checkpoint: trailing bytes")
    return out


def params_from_checkpoint(path, frozen: bool = False) -> list[Parameter]:
    arrays = load_checkpoint(path)
    return [
        Parameter(name, Tensor(arr, requires_grad=not frozen), frozen=frozen)
        for name, arr in arrays.items()
    ]


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
