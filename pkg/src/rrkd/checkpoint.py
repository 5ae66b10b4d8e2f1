"""Binary checkpoint format.

Layout, all integers little-endian::

    b"RRKD" | u32 version (=1) | u32 entry count
    per entry: u32 name length | UTF-8 name | u8 dtype code | u8 ndim
               | ndim x u32 dims | raw little-endian element data

dtype code 0 is float32; code 1 (float64) is used for 64-bit runs.
"""

from __future__ import annotations

import io
import os
import struct
from collections import OrderedDict
from typing import Mapping

import numpy as np

from .errors import CheckpointError

MAGIC = b"RRKD"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def dumps(state: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(state)))
    for name, arr in state.items():
        arr = np.asarray(arr)
        code = _DTYPE_TO_CODE.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> "OrderedDict[str, np.ndarray]":
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointError(f"truncated checkpoint while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointError("not an RRKD checkpoint (bad magic bytes)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    state = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = bytes(take(name_len, "name")).decode("utf-8")
        code, ndim = struct.unpack("<BB", take(2, f"{name} header"))
        if code not in _CODES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        dt = _CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(take(size * dt.itemsize, f"{name} data"), dtype=dt)
        state[name] = data.reshape(dims).astype(dt.newbyteorder("="))
    if pos != len(view):
        raise CheckpointError(f"{len(view) - pos} trailing bytes after {count} entries")
    return state


def save(path, state: Mapping[str, np.ndarray]):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(state))
    os.replace(tmp, path)


def load(path) -> "OrderedDict[str, np.ndarray]":
    try:
        with open(path, "rb") as fh:
            return loads(fh.read())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
