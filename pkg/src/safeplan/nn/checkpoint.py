"""Binary checkpoint format.

Layout (all integers u32 little-endian)::

    b"NMDR" | version byte 0x01 | count
    repeated count times:
        name length | UTF-8 name | rank | dims... | float32 little-endian data

A parameter set contributes its tensors, ``<name>.m1`` / ``<name>.m2`` moment
tensors, and a rank-0 step scalar.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from safeplan.errors import CheckpointFormatError, ShapeError

MAGIC = b"NMDR"
VERSION = 1


def write_tensors(path, entries: dict[str, np.ndarray]):
    path = Path(path)
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(entries))]
    for name, arr in entries.items():
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would turn rank 0 into rank 1
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def read_tensors(path) -> dict[str, np.ndarray]:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 9 or buf[4] != VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version")
    pos = 5

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointFormatError(f"{path}: truncated")
        out = buf[pos:pos + n]
        pos += n
        return out

    (count,) = struct.unpack("<I", take(4))
    entries = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", take(4))
        name = take(n).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32).reshape(dims)
        entries[name] = data
    if pos != len(buf):
        raise CheckpointFormatError(f"{path}: trailing bytes")
    return entries


def paramset_entries(ps, step_key="step") -> dict[str, np.ndarray]:
    out = dict(ps.state())
    out[step_key] = np.asarray(ps.step, np.float32)
    return out


def save_paramset(path, ps):
    write_tensors(path, paramset_entries(ps))


def load_paramset(path, ps):
    entries = read_tensors(path)
    try:
        ps.load_state(entries, int(np.asarray(entries["step"]).reshape(-1)[0]))
    except KeyError as e:
        raise CheckpointFormatError(f"{path}: missing entry {e}") from e
    except ShapeError as e:
        raise CheckpointFormatError(f"{path}: {e}") from e
    return ps
