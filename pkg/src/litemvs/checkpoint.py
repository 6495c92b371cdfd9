"""Binary checkpoint container: named little-endian arrays with a version header."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"LMVC"
VERSION = 1

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_TAG_FOR_KIND = {("f", 4): 0, ("f", 8): 1, ("i", 8): 2}


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write named arrays to ``path``; float32/float64/int64 payloads only."""
    entries = sorted(arrays.items())
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(entries)))
        for name, arr in entries:
            arr = np.asarray(arr)
            if not arr.flags.c_contiguous:
                arr = np.ascontiguousarray(arr)  # keeps 0-d shapes intact above
            key = (arr.dtype.kind, arr.dtype.itemsize)
            if key not in _TAG_FOR_KIND:
                raise ValueError(f"unsupported checkpoint dtype {arr.dtype} for '{name}'")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BB", _TAG_FOR_KIND[key], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim))
            dtype = _DTYPE_TAGS[tag]
            n = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(n * dtype.itemsize), dtype=dtype)
            arrays[name] = data.reshape(shape).astype(dtype.newbyteorder("="))
        return arrays
