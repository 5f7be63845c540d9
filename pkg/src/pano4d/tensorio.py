"""``P4DT`` binary tensor files.

Layout (little-endian)::

    magic   4 bytes  b"P4DT"
    version u16      1
    dtype   u8       1 = float32, 2 = float64, 3 = uint8, 4 = int32
    rank    u8
    dims    rank x u32
    payload prod(dims) * itemsize bytes, row-major
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"P4DT"
VERSION = 1
DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("u1"), 4: np.dtype("<i4")}


class TensorFormatError(ValueError):
    pass


def encode_tensor(array: np.ndarray, dtype=np.float32) -> bytes:
    a = np.asarray(array, dtype=dtype)
    code = _code(a.dtype)
    if a.ndim > 255:
        raise TensorFormatError("rank too large")
    header = struct.pack("<4sHBB", MAGIC, VERSION, code, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return header + a.astype(DTYPES[code], copy=False).tobytes(order="C")


def decode_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 8:
        raise TensorFormatError("truncated header")
    magic, version, code, rank = struct.unpack_from("<4sHBB", buf, 0)
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}")
    if code not in DTYPES:
        raise TensorFormatError(f"unknown dtype code {code}")
    off = 8 + 4 * rank
    if len(buf) < off:
        raise TensorFormatError("truncated dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 8)
    dt = DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dt.itemsize
    if len(buf) - off != expected:
        raise TensorFormatError(f"payload is {len(buf) - off} bytes, expected {expected}")
    return np.frombuffer(buf, dtype=dt, offset=off).reshape(dims).astype(dt.newbyteorder("="))


def write_tensor(path, array: np.ndarray, dtype=np.float32) -> None:
    """Write atomically (temp file + rename) so readers never see partial files."""
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_bytes(encode_tensor(array, dtype))
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    return decode_tensor(Path(path).read_bytes())


def _code(dt: np.dtype) -> int:
    for code, d in DTYPES.items():
        if np.dtype(dt).kind == d.kind and np.dtype(dt).itemsize == d.itemsize:
            return code
    raise TensorFormatError(f"unsupported dtype {dt}")
