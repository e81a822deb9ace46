"""Binary tensor and checkpoint formats.

Tensor blob layout, all integers little-endian:

    magic   4 bytes  b"DN4T"
    version 1 byte   0x01
    dtype   1 byte   0x00 = float32
    ndims   1 byte
    extents u32 * ndims
    payload row-major float32

A checkpoint wraps named tensors:

    magic   4 bytes  b"DN4C"
    version 1 byte   0x01
    count   u32
    entries count * (u16 name length, UTF-8 name, tensor blob)

Entries are written in a fixed parameter order, so two checkpoints of the
same architecture and values are byte-identical.
"""
from __future__ import annotations

import io
import struct
from typing import BinaryIO

import numpy as np

from .errors import FormatError

__all__ = [
    "write_tensor", "read_tensor", "tensor_bytes",
    "save_tensor_file", "load_tensor_file",
    "write_checkpoint", "read_checkpoint",
    "checkpoint_bytes", "load_checkpoint_file", "save_checkpoint_file",
]

_TENSOR_MAGIC = b"DN4T"
_CHECKPOINT_MAGIC = b"DN4C"
_VERSION = 1
_DTYPE_F32 = 0


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    # note: ascontiguousarray would promote 0-d to 1-d, asarray keeps rank
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim > 255:
        raise FormatError("tensor rank exceeds format limit")
    fh.write(_TENSOR_MAGIC)
    fh.write(bytes([_VERSION, _DTYPE_F32, arr.ndim]))
    for ext in arr.shape:
        if ext > 0xFFFFFFFF:
            raise FormatError("tensor extent exceeds u32")
        fh.write(struct.pack("<I", ext))
    fh.write(arr.astype("<f4").tobytes(order="C"))


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated stream: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != _TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    version, dtype_code, ndims = _read_exact(fh, 3)
    if version != _VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if dtype_code != _DTYPE_F32:
        raise FormatError(f"unsupported dtype code {dtype_code}")
    shape = tuple(struct.unpack("<I", _read_exact(fh, 4))[0] for _ in range(ndims))
    count = int(np.prod(shape, dtype=np.int64)) if shape else 1
    payload = _read_exact(fh, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def tensor_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()


def save_tensor_file(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor_file(path) -> np.ndarray:
    with open(path, "rb") as fh:
        arr = read_tensor(fh)
        if fh.read(1):
            raise FormatError("trailing bytes after tensor")
    return arr


def write_checkpoint(fh: BinaryIO, named: list[tuple[str, np.ndarray]]) -> None:
    """Write (name, array) pairs in the given order."""
    fh.write(_CHECKPOINT_MAGIC)
    fh.write(bytes([_VERSION]))
    fh.write(struct.pack("<I", len(named)))
    seen: set[str] = set()
    for name, arr in named:
        if name in seen:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        seen.add(name)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise FormatError("checkpoint entry name too long")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        write_tensor(fh, arr)


def read_checkpoint(fh: BinaryIO) -> dict[str, np.ndarray]:
    magic = _read_exact(fh, 4)
    if magic != _CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {magic!r}")
    version = _read_exact(fh, 1)[0]
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    count = struct.unpack("<I", _read_exact(fh, 4))[0]
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        nlen = struct.unpack("<H", _read_exact(fh, 2))[0]
        name = _read_exact(fh, nlen).decode("utf-8")
        if name in out:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        out[name] = read_tensor(fh)
    trailing = fh.read(1)
    if trailing:
        raise FormatError("trailing bytes after checkpoint")
    return out


def checkpoint_bytes(named: list[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    write_checkpoint(buf, named)
    return buf.getvalue()


def save_checkpoint_file(path, named: list[tuple[str, np.ndarray]]) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(fh, named)


def load_checkpoint_file(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        return read_checkpoint(fh)
