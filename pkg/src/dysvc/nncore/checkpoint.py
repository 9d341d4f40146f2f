"""DYSVC1 checkpoint container.

Layout: the ASCII magic ``DYSVC1`` followed by one record per parameter in
name-sorted order.  Each record is ``u64 name_len, name bytes, u64 rank,
rank * u64 extents, float32 values`` with everything little-endian.
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DYSVC1"


class IntegrityError(ValueError):
    """A checkpoint or feature file is corrupt or of the wrong kind."""


def dumps(state: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    for name in sorted(state):
        arr = np.asarray(state[name], dtype="<f4", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<Q", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes, source: str = "<bytes>") -> dict[str, np.ndarray]:
    if not blob.startswith(MAGIC):
        raise IntegrityError(f"{source}: bad magic, not a DYSVC1 checkpoint")
    pos = len(MAGIC)
    state: dict[str, np.ndarray] = {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            name = blob[pos : pos + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise IntegrityError(f"{source}: truncated record name")
            pos += n
            (rank,) = struct.unpack_from("<Q", blob, pos)
            pos += 8
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape)) if rank else 1
            end = pos + 4 * count
            if end > len(blob):
                raise IntegrityError(f"{source}: truncated values for {name!r}")
            state[name] = np.frombuffer(blob[pos:end], dtype="<f4").reshape(shape).copy()
            pos = end
    except (struct.error, UnicodeDecodeError) as exc:
        raise IntegrityError(f"{source}: malformed record ({exc})") from exc
    return state


def save(state: dict[str, np.ndarray], path) -> str:
    """Write ``state`` and return the sha256 of the bytes written."""
    blob = dumps(state)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    return loads(path.read_bytes(), source=str(path))


def digest(state: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps(state)).hexdigest()
