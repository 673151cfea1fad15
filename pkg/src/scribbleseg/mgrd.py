"""MGRD binary grid format.

Layout: magic `MGRD`, version byte 0x01, dtype byte (0x01 = u8 labels,
0x02 = f32 little-endian), ndim byte, ndim u32 little-endian dims, then the
row-major payload.  All image and label files in this package use it.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

MAGIC = b"MGRD"
VERSION = 0x01
DTYPE_U8 = 0x01
DTYPE_F32 = 0x02

_DTYPES = {DTYPE_U8: np.dtype(np.uint8), DTYPE_F32: np.dtype("<f4")}


def write_mgrd(path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype.kind in "ui" or arr.dtype.kind == "b":
        payload = np.ascontiguousarray(arr, dtype=np.uint8)
        code = DTYPE_U8
    elif arr.dtype.kind == "f":
        payload = np.ascontiguousarray(arr, dtype="<f4")
        code = DTYPE_F32
    else:
        raise DataError(f"unsupported array dtype {arr.dtype} for MGRD")
    if arr.ndim < 1 or arr.ndim > 4:
        raise DataError(f"unsupported rank {arr.ndim} for MGRD")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload.tobytes())
    except OSError as exc:
        raise DataError(f"cannot write MGRD file {path}: {exc}") from exc


def read_mgrd(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read MGRD file {path}: {exc}") from exc
    if len(blob) < 7:
        raise DataError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}, expected {MAGIC!r}")
    version, code, ndim = struct.unpack_from("<BBB", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported MGRD version {version}")
    if code not in _DTYPES:
        raise DataError(f"{path}: unknown dtype byte 0x{code:02x}")
    offset = 7
    if len(blob) < offset + 4 * ndim:
        raise DataError(f"{path}: truncated dimension list")
    shape = struct.unpack_from(f"<{ndim}I", blob, offset)
    offset += 4 * ndim
    dtype = _DTYPES[code]
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(blob) - offset
    if actual != expected:
        raise DataError(
            f"{path}: payload size mismatch, expected {expected} bytes, got {actual}"
        )
    arr = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
    return arr.reshape(shape).copy()
