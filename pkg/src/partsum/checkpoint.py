"""Binary parameter checkpoints.

Layout (all integers unsigned little-endian, floats IEEE-754 binary64 little-endian)::

    magic      8 bytes   b"PSTCKPT1"
    count      u32       number of entries
    entry * count:
        name_len  u32
        name      name_len bytes, UTF-8
        ndim      u32
        dims      ndim * u32
        data      prod(dims) * f64, row-major

Entries are written in the order given, so equal inputs give equal bytes.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"PSTCKPT1"


class CheckpointError(ValueError):
    pass


def dumps(entries: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC, struct.pack("<I", len(entries))]
    for name, value in entries.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8
    try:
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}I", blob, pos)
            pos += 4 * ndim
            size = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f8", count=size, offset=pos)
            pos += 8 * size
            out[name] = data.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError(f"{len(blob) - pos} trailing bytes after last entry")
    return out


def save(path, entries: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(entries))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
