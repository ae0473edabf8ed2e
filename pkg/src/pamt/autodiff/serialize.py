"""Binary parameter snapshots and content checksums.

File layout: magic ``b"PAMT"``, version u32, then one record per parameter
until EOF.  Record: name length (u32), name bytes (utf-8), shape rank (u32),
dims (u32 each), raw little-endian float64 payload.  Round-trips are
bit-exact.
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path

import numpy as np

from ..errors import DataError
from .tensor import ParamRegistry

MAGIC = b"PAMT"
VERSION = 1


def _pack_record(name: str, value: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    arr = np.asarray(value, dtype="<f8", order="C")
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", arr.ndim)]
    parts.extend(struct.pack("<I", d) for d in arr.shape)
    parts.append(arr.tobytes())
    return b"".join(parts)


def save_arrays(path, arrays: dict[str, np.ndarray]) -> None:
    """Write named float64 arrays in snapshot format."""
    blob = [MAGIC, struct.pack("<I", VERSION)]
    blob.extend(_pack_record(name, value) for name, value in arrays.items())
    Path(path).write_bytes(b"".join(blob))


class _Reader:
    def __init__(self, path, buf: bytes):
        self.path = path
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DataError(f"{self.path}: truncated snapshot while reading {what}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def load_arrays(path) -> dict[str, np.ndarray]:
    """Read a snapshot back into an ordered name -> array mapping."""
    r = _Reader(path, Path(path).read_bytes())
    if r.take(4, "magic") != MAGIC:
        raise DataError(f"{path}: bad magic, not a snapshot file")
    version = r.u32("version")
    if version != VERSION:
        raise DataError(f"{path}: unsupported snapshot version {version}")
    out: dict[str, np.ndarray] = {}
    while r.pos < len(r.buf):
        nlen = r.u32("name length")
        name = r.take(nlen, "name").decode("utf-8")
        rank = r.u32("rank")
        shape = tuple(r.u32("dim") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        payload = r.take(8 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype="<f8").reshape(shape)
        out[name] = arr.astype(np.float64).copy()
    return out


def save_registry(path, registry: ParamRegistry) -> None:
    save_arrays(path, {p.name: p.data for p in registry})


def load_registry(path, registry: ParamRegistry) -> None:
    """Load a snapshot into an existing registry (names and shapes must match)."""
    state = load_arrays(path)
    for name, value in state.items():
        if name not in registry:
            raise DataError(f"{path}: snapshot names unknown parameter {name!r}")
        expect = registry[name].data.shape
        if value.shape != expect:
            raise DataError(
                f"{path}: shape mismatch for {name!r}: file has {value.shape}, "
                f"registry has {expect}"
            )
    registry.load_state(state)


def array_checksum(value: np.ndarray) -> str:
    """SHA-256 over the raw little-endian float64 bytes plus the shape."""
    arr = np.asarray(value, dtype="<f8", order="C")
    h = hashlib.sha256()
    h.update(repr(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


def registry_checksums(registry: ParamRegistry, prefix: str = "") -> dict[str, str]:
    """Per-parameter checksums, optionally restricted to a name prefix."""
    return {p.name: array_checksum(p.data) for p in registry if p.name.startswith(prefix)}


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
