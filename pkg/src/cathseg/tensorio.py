"""Binary tensor files and directory checkpoints.

File layout (all integers little-endian)::

    8 bytes   magic b"AIARTNSR"
    u8        dtype code, 0 = float32, 1 = float64
    u8        rank
    u32*rank  extents
    payload   row-major little-endian values

A checkpoint is a directory holding one such file per named array, at
``<root>/<name>.tns`` where ``name`` may contain ``/``.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AIARTNSR"
SUFFIX = ".tns"
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


class TensorFormatError(ValueError):
    """A tensor file is truncated, has a bad header, or a bad payload size."""


def encode_tensor(array) -> bytes:
    arr = np.asarray(array)
    if arr.dtype not in _CODES:
        arr = arr.astype(np.float32)
    if arr.ndim > 255:
        raise ValueError("rank above 255 cannot be encoded")
    code = _CODES[arr.dtype]
    header = MAGIC + struct.pack("<BB", code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def decode_tensor(blob: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(blob) < 10 or blob[:8] != MAGIC:
        raise TensorFormatError(f"{source}: missing AIARTNSR header")
    code, rank = struct.unpack_from("<BB", blob, 8)
    if code not in _DTYPES:
        raise TensorFormatError(f"{source}: unknown dtype code {code}")
    offset = 10 + 4 * rank
    if len(blob) < offset:
        raise TensorFormatError(f"{source}: truncated shape header")
    shape = struct.unpack_from(f"<{rank}I", blob, 10)
    dtype = _DTYPES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(blob) - offset != expected:
        raise TensorFormatError(f"{source}: payload is {len(blob) - offset} bytes, expected {expected}")
    arr = np.frombuffer(blob, dtype=dtype, offset=offset).reshape(shape)
    return arr.astype(dtype.newbyteorder("="), copy=True)


def write_tensor(path, array) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(array))


def read_tensor(path) -> np.ndarray:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise TensorFormatError(f"{path}: {exc.strerror}") from exc
    return decode_tensor(blob, str(path))


def save_arrays(root, arrays: dict) -> None:
    """Write every ``name -> array`` pair under ``root``."""
    root = Path(root)
    for name, arr in arrays.items():
        write_tensor(root / (name + SUFFIX), arr)


def load_arrays(root, prefix: str = "") -> dict[str, np.ndarray]:
    """Read all tensor files below ``root/prefix`` keyed by name relative to ``root``."""
    root = Path(root)
    base = root / prefix if prefix else root
    out = {}
    for dirpath, _, files in sorted(os.walk(base)):
        for fname in sorted(files):
            if fname.endswith(SUFFIX):
                full = Path(dirpath) / fname
                name = full.relative_to(root).as_posix()[: -len(SUFFIX)]
                out[name] = read_tensor(full)
    return out
