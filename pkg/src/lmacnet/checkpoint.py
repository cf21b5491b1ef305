"""Binary parameter container with a bit-exact round trip.

Layout (all integers little-endian):
    magic   4 bytes  b"LMAC"
    version u32
    count   u32          number of parameter records
    then per parameter:
    name_len u32, name (UTF-8), rank u32, extents rank*u64,
    payload prod(extents) little-endian float32 values
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LMAC"
VERSION = 1


class CheckpointError(Exception):
    pass


def save_checkpoint(path, named_arrays: dict[str, np.ndarray]) -> None:
    """Write parameters in insertion order; values are stored as float32."""
    path = Path(path)
    chunks = [MAGIC, struct.pack("<II", VERSION, len(named_arrays))]
    for name, arr in named_arrays.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4", order="C")  # keeps 0-d shapes intact
        chunks.append(struct.pack("<I", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    view = memoryview(blob)
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", blob, offset)
            offset += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, offset) if rank else ()
            offset += 8 * rank
            n = int(np.prod(shape, dtype=np.int64)) if rank else 1
            nbytes = 4 * n
            if offset + nbytes > len(blob):
                raise CheckpointError(f"{path}: truncated payload for parameter {name!r}")
            arr = np.frombuffer(view[offset:offset + nbytes], dtype="<f4").reshape(shape).copy()
            offset += nbytes
            out[name] = arr
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated header ({exc})") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after last record")
    return out
