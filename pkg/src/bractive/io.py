"""Binary tensor files: a tiny fixed little-endian format with a shape header.

Layout: 4-byte magic, 1-byte version, 1-byte dtype code, 1-byte rank, then
rank uint32 extents, then the raw little-endian payload. Bit-exact across
platforms.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = ["write_tensor", "read_tensor", "tensor_to_bytes", "tensor_from_bytes",
           "CorruptFileError"]

MAGIC = b"BTSR"
VERSION = 1

_DTYPE_CODES = {"<f4": 0, "<i4": 1, "<f8": 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


class CorruptFileError(IOError):
    """A tensor file is truncated or malformed."""


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr)
    key = arr.dtype.newbyteorder("<").str
    if key not in _DTYPE_CODES:
        raise TypeError(f"unsupported dtype {arr.dtype}; use float32, int32 or float64")
    header = MAGIC + struct.pack("<BBB", VERSION, _DTYPE_CODES[key], arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype(key).tobytes()


def tensor_from_bytes(raw: bytes, label: str = "<bytes>") -> np.ndarray:
    if len(raw) < 7 or raw[:4] != MAGIC:
        raise CorruptFileError(f"{label}: not a tensor file (bad magic)")
    version, code, rank = struct.unpack("<BBB", raw[4:7])
    if version != VERSION:
        raise CorruptFileError(f"{label}: unsupported format version {version}")
    if code not in _CODE_DTYPES:
        raise CorruptFileError(f"{label}: unknown dtype code {code}")
    offset = 7 + 4 * rank
    if len(raw) < offset:
        raise CorruptFileError(f"{label}: truncated shape header")
    shape = struct.unpack(f"<{rank}I", raw[7:offset])
    dtype = np.dtype(_CODE_DTYPES[code])
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = raw[offset:]
    if len(payload) != expected:
        raise CorruptFileError(
            f"{label}: payload is {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes(), label=str(path))
