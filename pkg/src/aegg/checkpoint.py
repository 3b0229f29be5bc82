"""Named-tensor archive.

Layout (little-endian): magic ``AEGG``, u32 version, u32 tensor count, then
per tensor u16 name length, UTF-8 name, u8 rank, rank x u32 dims, raw float32
data.
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

MAGIC = b"AEGG"
VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path: str | os.PathLike, tensors: Iterable[tuple[str, np.ndarray]]) -> None:
    chunks = []
    seen = set()
    items = list(tensors)
    for name, arr in items:
        if name in seen:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        seen.add(name)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:40]}...")
        a = np.asarray(arr, dtype="<f4")
        if a.ndim > 255:
            raise CheckpointError(f"rank {a.ndim} too large for {name}")
        chunks.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim))
        chunks.append(struct.pack(f"<{a.ndim}I", *a.shape))
        chunks.append(np.ascontiguousarray(a).tobytes())
    header = MAGIC + struct.pack("<II", VERSION, len(items))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(header + b"".join(chunks))
    os.replace(tmp, path)


def read_tensors(path: str | os.PathLike, prefixes: tuple[str, ...] | None = None) -> dict[str, np.ndarray]:
    """Load tensors; with ``prefixes`` only names starting with one of them are materialised."""
    buf = Path(path).read_bytes()
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not an AEGG checkpoint")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version} (expected {VERSION})")
    pos = 12
    out: dict[str, np.ndarray] = {}
    seen: set[str] = set()

    def need(n):
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated at byte {pos}")

    for _ in range(count):
        need(2)
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        need(nlen + 1)
        name = buf[pos:pos + nlen].decode("utf-8")
        pos += nlen
        rank = buf[pos]
        pos += 1
        need(4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        nbytes = 4 * int(np.prod(dims, dtype=np.int64))
        need(nbytes)
        if name in seen:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        seen.add(name)
        if prefixes is None or name.startswith(prefixes):
            out[name] = np.frombuffer(buf, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
        pos += nbytes
    if pos != len(buf):
        raise CheckpointError(f"{path}: {len(buf) - pos} trailing bytes")
    return out


def pack_scalars(prefix: str, values: Mapping[str, float]) -> list[tuple[str, np.ndarray]]:
    return [(f"{prefix}{k}", np.asarray(v, dtype=np.float32)) for k, v in values.items()]
