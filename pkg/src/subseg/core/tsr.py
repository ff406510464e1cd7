"""TSR1 binary tensor format.

Layout: magic ``b"TSR1"``, u32 LE rank, ``rank`` x u32 LE dims, then the
payload as f32 LE in row-major order.
"""

from __future__ import annotations

import os
import struct

import numpy as np

MAGIC = b"TSR1"


class TsrError(IOError):
    pass


def encode(array) -> bytes:
    a = np.asarray(array)
    if a.ndim == 0:
        a = a.reshape(1)
    if not np.all(np.isfinite(a)):
        raise TsrError("refusing to encode non-finite values")
    header = MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + np.ascontiguousarray(a, dtype="<f4").tobytes()


def decode(buf: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(buf) < 8 or buf[:4] != MAGIC:
        raise TsrError(f"{name}: bad magic, not a TSR1 tensor")
    (rank,) = struct.unpack_from("<I", buf, 4)
    off = 8 + 4 * rank
    if len(buf) < off:
        raise TsrError(f"{name}: truncated header (rank {rank})")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 4 * count:
        raise TsrError(f"{name}: payload has {len(buf) - off} bytes, expected {4 * count} for shape {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def save(path: str | os.PathLike, array) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(array))


def load(path: str | os.PathLike) -> np.ndarray:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise TsrError(f"cannot read tensor file {os.fspath(path)}: {exc.strerror}") from exc
    return decode(buf, os.fspath(path))
