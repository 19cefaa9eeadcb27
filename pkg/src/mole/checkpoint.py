"""Bit-exact named-tensor container.

Layout, all integers little-endian:

    magic   6 bytes  ``MOLE1\\0``
    u32     format version (1)
    u32     tensor count
    directory, one entry per tensor in insertion order:
        u16      name length in bytes
        bytes    UTF-8 name
        u8       dtype code (0 = float32, 1 = float64)
        u8       ndim
        ndim*u64 dims
        u64      byte offset into the payload
    payload  concatenated raw little-endian buffers, row-major
    u64      FNV-1a hash of directory + payload

save -> load -> save reproduces the file byte for byte. The trailing
hash is verified on load; a mismatch is a hard error distinct from
truncation, bad magic, and unknown version.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import (
    BadMagicError,
    BadVersionError,
    CheckpointError,
    HashMismatchError,
    TruncatedError,
)
from .tensor import Tensor

MAGIC = b"MOLE1\x00"
VERSION = 1

_FNV_BASIS = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_CODE_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_TO_CODE = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def fnv1a(data: bytes) -> int:
    """64-bit FNV-1a hash."""
    h = _FNV_BASIS
    for byte in data:
        h = ((h ^ byte) * _FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def _as_array(name: str, value) -> np.ndarray:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value)
    if arr.dtype not in _DTYPE_TO_CODE:
        raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
    return np.ascontiguousarray(arr) if arr.ndim else arr


def _directory_and_payload(named: Mapping[str, "Tensor | np.ndarray"]) -> tuple[bytes, bytes]:
    directory = bytearray()
    payload = bytearray()
    for name, value in named.items():
        arr = _as_array(name, value)
        name_bytes = name.encode("utf-8")
        if len(name_bytes) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: '{name[:40]}...'")
        directory += struct.pack("<H", len(name_bytes))
        directory += name_bytes
        directory += struct.pack("<BB", _DTYPE_TO_CODE[arr.dtype], arr.ndim)
        for dim in arr.shape:
            directory += struct.pack("<Q", dim)
        directory += struct.pack("<Q", len(payload))
        payload += arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
    return bytes(directory), bytes(payload)


def checkpoint_bytes(named: Mapping[str, "Tensor | np.ndarray"]) -> bytes:
    """Serialize to the container format in memory."""
    directory, payload = _directory_and_payload(named)
    body = directory + payload
    header = MAGIC + struct.pack("<II", VERSION, len(named))
    return header + body + struct.pack("<Q", fnv1a(body))


def content_hash(named: Mapping[str, "Tensor | np.ndarray"]) -> int:
    """FNV-1a over directory + payload only; a cheap lineage fingerprint.

    Sensitive to names, shapes, dtypes, bytes, and order. Callers wanting
    order independence should pass a sorted mapping.
    """
    directory, payload = _directory_and_payload(named)
    return fnv1a(directory + payload)


def save_checkpoint(named: Mapping[str, "Tensor | np.ndarray"], path: "str | Path") -> None:
    Path(path).write_bytes(checkpoint_bytes(named))


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.blob):
            raise TruncatedError(f"{self.path}: truncated while reading {what}")
        out = self.blob[self.pos : self.pos + count]
        self.pos += count
        return out

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]


def load_checkpoint(path: "str | Path") -> dict[str, Tensor]:
    """Read a container back into named Tensors (grads off).

    Raises BadMagicError, BadVersionError, TruncatedError, or
    HashMismatchError; all carry the file path.
    """
    blob = Path(path).read_bytes()
    r = _Reader(blob, str(path))
    if r.take(len(MAGIC), "magic") != MAGIC:
        raise BadMagicError(f"{path}: not a checkpoint file (bad magic)")
    version = r.u32("version")
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported checkpoint version {version}")
    count = r.u32("tensor count")

    body_start = r.pos
    entries = []
    for i in range(count):
        name_len = r.u16(f"entry {i} name length")
        name = r.take(name_len, f"entry {i} name").decode("utf-8")
        code = r.u8(f"entry {i} dtype")
        if code not in _CODE_TO_DTYPE:
            raise CheckpointError(f"{path}: tensor '{name}' has unknown dtype code {code}")
        ndim = r.u8(f"entry {i} ndim")
        dims = tuple(r.u64(f"entry {i} dim {k}") for k in range(ndim))
        offset = r.u64(f"entry {i} offset")
        entries.append((name, _CODE_TO_DTYPE[code], dims, offset))

    expected_payload = 0
    for name, dtype, dims, offset in entries:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        expected_payload = max(expected_payload, offset + nbytes)
    remaining = len(blob) - r.pos
    if remaining < expected_payload + 8:
        raise TruncatedError(f"{path}: truncated payload or trailer (need {expected_payload + 8} bytes, have {remaining})")
    if remaining > expected_payload + 8:
        raise CheckpointError(f"{path}: {remaining - expected_payload - 8} unexpected trailing bytes")
    payload = blob[r.pos : len(blob) - 8]
    (stored_hash,) = struct.unpack("<Q", blob[len(blob) - 8 :])
    actual_hash = fnv1a(blob[body_start : len(blob) - 8])
    if actual_hash != stored_hash:
        raise HashMismatchError(
            f"{path}: checkpoint hash mismatch (stored {stored_hash:#018x}, computed {actual_hash:#018x})"
        )

    out: dict[str, Tensor] = {}
    for name, dtype, dims, offset in entries:
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize if dims else dtype.itemsize
        if offset + nbytes > len(payload):
            raise TruncatedError(f"{path}: payload too short for tensor '{name}'")
        if name in out:
            raise CheckpointError(f"{path}: duplicate tensor name '{name}'")
        arr = np.frombuffer(payload, dtype=dtype, count=max(nbytes // dtype.itemsize, 1), offset=offset)
        arr = arr.reshape(dims).astype(dtype.newbyteorder("="), copy=True)
        out[name] = Tensor(arr if dims else arr.reshape(()))
    return out
