"""Flat binary weight container.

Layout (little endian): magic ``MOCC``, u32 version, then one record per
parameter until end of file: u32 name length, UTF-8 name, u32 rank,
``rank`` u64 extents, float64 values in C order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import IoError

MAGIC = b"MOCC"
VERSION = 1


def encode_weights(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode_weights(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise IoError("not a weight container (bad magic)")
    if len(blob) < 8:
        raise IoError("truncated header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise IoError(f"unsupported weight container version {version}")
    pos, state = 8, {}
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            name = blob[pos + 4 : pos + 4 + n].decode("utf-8")
            pos += 4 + n
            (rank,) = struct.unpack_from("<I", blob, pos)
            shape = struct.unpack_from(f"<{rank}Q", blob, pos + 4)
            pos += 4 + 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise IoError(f"record {name!r} is truncated")
            state[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise IoError(f"corrupt weight container: {exc}") from exc
    return state


def save_weights(path, state: dict[str, np.ndarray]) -> None:
    try:
        Path(path).write_bytes(encode_weights(state))
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def load_weights(path) -> dict[str, np.ndarray]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    return decode_weights(blob)
