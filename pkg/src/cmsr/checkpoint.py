"""Binary tensor container.

Layout (all integers little-endian)::

    b"CMSR"                      magic
    u32                          format version
    u32                          tensor count
    per tensor:
        u32 + bytes              UTF-8 name
        u8                       dtype code (0 = float64)
        u32                      rank
        u64 * rank               extents
        f64 * prod(extents)      row-major payload
    u64                          checksum of every preceding byte

The checksum is an 8-byte BLAKE2b digest read as a little-endian u64.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = b"CMSR"
VERSION = 1
DTYPE_F64 = 0


def checksum64(data: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(data, digest_size=8).digest(), "little")


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BI", DTYPE_F64, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum64(body))


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 20:
        raise CheckpointError("checkpoint truncated: shorter than header and checksum")
    body, (stored,) = blob[:-8], struct.unpack("<Q", blob[-8:])
    if checksum64(body) != stored:
        raise CheckpointError("checkpoint checksum mismatch (corrupt or truncated file)")
    if body[:4] != MAGIC:
        raise CheckpointError(f"bad magic {body[:4]!r}")
    version, count = struct.unpack_from("<II", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos : pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BI", body, pos)
            pos += 5
            if dtype != DTYPE_F64:
                raise CheckpointError(f"tensor {name}: unsupported dtype code {dtype}")
            shape = struct.unpack_from(f"<{rank}Q", body, pos)
            pos += 8 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if pos + nbytes > len(body):
                raise CheckpointError(f"tensor {name}: payload truncated")
            out[name] = np.frombuffer(body, dtype="<f8", count=nbytes // 8, offset=pos).reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes after the last tensor")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(dumps(tensors))
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def file_checksum(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
