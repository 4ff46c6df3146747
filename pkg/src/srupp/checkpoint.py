"""SRPP checkpoint container.

Layout (little-endian)::

    b"SRPP"  u32 version  u64 tensor_count
    repeated: u64 name_len, UTF-8 name, tensor record (see tensor.write_tensor)

Writes go to a temporary file in the target directory and are renamed into
place, so readers never observe a half-written checkpoint.
"""
from __future__ import annotations

import io
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .tensor import FormatError, _read_exact, read_tensor, write_tensor

MAGIC = b"SRPP"
VERSION = 1


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        write_tensor(buf, np.asarray(arr))
    return buf.getvalue()


def loads(data: bytes) -> dict[str, np.ndarray]:
    stream = io.BytesIO(data)
    magic = _read_exact(stream, 4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}", 0)
    (version,) = struct.unpack("<I", _read_exact(stream, 4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version} (this build reads {VERSION})", 4)
    (count,) = struct.unpack("<Q", _read_exact(stream, 8, "tensor count"))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        at = stream.tell()
        (n,) = struct.unpack("<Q", _read_exact(stream, 8, "name length"))
        if n > 4096:
            raise FormatError(f"implausible name length {n}", at)
        try:
            name = _read_exact(stream, n, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid UTF-8", at + 8) from None
        if name in out:
            raise FormatError(f"duplicate tensor name {name!r}", at)
        out[name] = read_tensor(stream)
    if stream.read(1):
        raise FormatError("trailing bytes after last tensor", stream.tell() - 1)
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    atomic_write(path, dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
