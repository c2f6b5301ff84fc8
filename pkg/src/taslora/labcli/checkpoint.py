"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TLRA"  u32 version
    repeated: u32 name_len, name (UTF-8), u32 ndim, u64 dims[ndim], float32 payload
    u32 CRC32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"TLRA"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


def encode(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes(order="C"))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if len(blob) < 12:
        raise CorruptCheckpoint("checkpoint truncated")
    body, crc = blob[:-4], struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CorruptCheckpoint("CRC mismatch")
    if body[:4] != MAGIC:
        raise CorruptCheckpoint(f"bad magic {body[:4]!r}")
    version = struct.unpack("<I", body[4:8])[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    pos = 8
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<I", body, pos)
            pos += 4
            name = body[pos: pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", body, pos)
            pos += 4
            dims = struct.unpack_from(f"<{ndim}Q", body, pos)
            pos += 8 * ndim
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * count > len(body):
                raise CorruptCheckpoint(f"tensor {name!r} payload truncated")
            out[name] = np.frombuffer(body, dtype="<f4", count=count, offset=pos).reshape(dims).astype(np.float32)
            pos += 4 * count
    except (struct.error, UnicodeDecodeError) as exc:
        raise CorruptCheckpoint(f"malformed tensor table: {exc}") from None
    return out


def save(path, tensors: dict[str, np.ndarray]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(tensors))
    tmp.replace(path)


def load(path) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return decode(path.read_bytes())
