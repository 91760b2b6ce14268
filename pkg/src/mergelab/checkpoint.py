"""TCKP: a minimal named-tensor container used for checkpoints and triggers.

Layout (all integers little-endian):

    magic   4 bytes  b"TCKP"
    version u32      currently 1
    count   u32      number of entries
    entry   repeated:
        name_len u32, name UTF-8,
        dtype    u8   (0 = float32, 1 = float64),
        rank     u8,
        dims     rank x u32,
        data     raw little-endian values

Entry order is preserved on round-trip.
"""
from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"TCKP"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


def write_tckp(path, entries: dict[str, np.ndarray]) -> None:
    """Write named float arrays to `path` in TCKP format."""
    blob = bytearray()
    blob += MAGIC
    blob += struct.pack("<II", VERSION, len(entries))
    for name, arr in entries.items():
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODES:
            raise FormatError(f"entry '{name}': unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        blob += struct.pack("<I", len(encoded))
        blob += encoded
        blob += struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[arr.dtype]]).tobytes()
    Path(path).write_bytes(bytes(blob))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(
                f"truncated file at offset {self.pos}: expected {n} more bytes "
                f"for {what}, found {len(self.data) - self.pos}"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_tckp(path) -> dict[str, np.ndarray]:
    """Read a TCKP file back into an ordered name -> array mapping."""
    r = _Reader(Path(path).read_bytes())
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise FormatError(f"bad magic at offset 0: expected {MAGIC!r}, got {magic!r}")
    (version, count) = r.unpack("<II", "header")
    if version != VERSION:
        raise FormatError(f"unsupported version {version} at offset 4 (expected {VERSION})")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        dtype_code, rank = r.unpack("<BB", f"entry '{name}' dtype/rank")
        if dtype_code not in _DTYPES:
            raise FormatError(f"entry '{name}': unknown dtype code {dtype_code}")
        dims = r.unpack(f"<{rank}I", f"entry '{name}' dims") if rank else ()
        dtype = _DTYPES[dtype_code]
        n_items = int(np.prod(dims, dtype=np.int64)) if rank else 1
        raw = r.take(n_items * dtype.itemsize, f"entry '{name}' data")
        arr = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
        entries[name] = arr
    if r.pos != len(r.data):
        raise FormatError(f"trailing bytes at offset {r.pos}: file is {len(r.data)} bytes")
    return entries


def file_digest(path) -> str:
    """Hex SHA-256 of a file's bytes, used in experiment fingerprints."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def encode_text(value: str) -> np.ndarray:
    """Encode a string as a float32 byte array so it fits the container."""
    return np.frombuffer(value.encode("utf-8"), dtype=np.uint8).astype(np.float32)


def decode_text(arr: np.ndarray) -> str:
    return np.asarray(arr).astype(np.uint8).tobytes().decode("utf-8")
