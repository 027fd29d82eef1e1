"""FTEN tensor container.

Layout (all integers little-endian)::

    b"FTEN" | u16 version (=1) | u32 entry count
    per entry:
        u16 name length | UTF-8 name | u8 dtype (0=f32, 1=i64) | u8 rank
        | u64 dim * rank | payload (prod(dims) elements, little-endian)

A rank-0 entry is a scalar with a one-element payload.
"""

from __future__ import annotations

import os
import struct
import tempfile
from pathlib import Path

import numpy as np

MAGIC = b"FTEN"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<i8")}
CODES = {np.dtype("<f4"): 0, np.dtype("<i8"): 1}


class ContainerError(ValueError):
    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


class MagicMismatchError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


class TruncatedError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


class UnsupportedDtypeError(ContainerError):
    pass


def _coerce(name, value):
    arr = np.asarray(value)
    if arr.dtype.kind == "f":
        return arr.astype("<f4")
    if arr.dtype.kind in "iub":
        return arr.astype("<i8")
    raise UnsupportedDtypeError(f"entry {name!r} has unsupported dtype {arr.dtype}", -1)


def encode(entries) -> bytes:
    """Serialise a mapping (or sequence of pairs) name -> array."""
    items = list(entries.items()) if hasattr(entries, "items") else list(entries)
    out = bytearray(MAGIC + struct.pack("<HI", VERSION, len(items)))
    seen = set()
    for name, value in items:
        if name in seen:
            raise DuplicateNameError(f"duplicate entry name {name!r}", len(out))
        seen.add(name)
        arr = _coerce(name, value)
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<BB", CODES[arr.dtype], arr.ndim)
        out += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        out += np.ascontiguousarray(arr).tobytes()
    return bytes(out)


def decode(buf: bytes) -> dict:
    view = memoryview(buf)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(view):
            raise TruncatedError(f"truncated {what}: need {n} bytes, have {len(view) - pos}", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(view[:4]) != MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(view[:4])!r}", 0)
    pos = 4
    version, count = struct.unpack("<HI", take(6, "header"))
    if version != VERSION:
        raise VersionError(f"unsupported version {version}", 4)
    entries = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = bytes(take(nlen, "name")).decode("utf-8")
        if name in entries:
            raise DuplicateNameError(f"duplicate entry name {name!r}", start)
        code_at = pos
        code, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if code not in DTYPES:
            raise UnsupportedDtypeError(f"unsupported dtype code {code}", code_at)
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        dtype = DTYPES[code]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = take(n * dtype.itemsize, f"payload of {name!r}")
        entries[name] = np.frombuffer(payload, dtype=dtype).reshape(dims).copy()
    return entries


def atomic_write_bytes(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_container(path, entries):
    atomic_write_bytes(path, encode(entries))


def read_container(path) -> dict:
    return decode(Path(path).read_bytes())
