"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"STAB1"                      magic
    uint32                        format version
    uint64 + bytes                metadata, UTF-8 JSON with sorted keys
    uint32                        parameter count
    per parameter:
        uint32 + bytes            name (UTF-8)
        uint32                    rank
        uint64 * rank             extents
        float64 * prod(extents)   values, row-major
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"STAB1"
VERSION = 1


def encode(metadata: dict, params: list[tuple[str, np.ndarray]]) -> bytes:
    meta = json.dumps(metadata, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    chunks = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(meta)), meta, struct.pack("<I", len(params))]
    for name, value in params:
        raw = name.encode("utf-8")
        arr = np.asarray(value, dtype="<f8", order="C")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(buf: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("bad magic: not a STAB1 checkpoint")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (meta_len,) = r.unpack("<Q")
    try:
        metadata = json.loads(r.take(meta_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt metadata block: {exc}") from None
    (count,) = r.unpack("<I")
    params = []
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        (rank,) = r.unpack("<I")
        shape = r.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params.append((name, values))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last parameter")
    return metadata, params


def save_checkpoint(path: str | Path, metadata: dict, params: list[tuple[str, np.ndarray]]) -> None:
    Path(path).write_bytes(encode(metadata, params))


def load_checkpoint(path: str | Path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    return decode(Path(path).read_bytes())
