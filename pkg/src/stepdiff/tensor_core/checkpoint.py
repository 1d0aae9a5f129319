"""``STPC`` checkpoint container: named little-endian f64 arrays."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"STPC"
VERSION = 1


class CheckpointFormatError(ValueError):
    pass


def dumps(records: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(records))]
    for name, arr in records.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF or arr.ndim > 0xFF:
            raise CheckpointFormatError(f"record {name!r} does not fit the header fields")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise CheckpointFormatError("not an STPC checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported STPC version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off:off + n].decode("utf-8")
            if len(name.encode()) != n:
                raise struct.error("short name")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            if off + 8 * size > len(buf):
                raise struct.error("short payload")
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(dims).astype(np.float64)
            off += 8 * size
    except struct.error as exc:
        raise CheckpointFormatError(f"truncated STPC checkpoint: {exc}") from None
    return out


def save(path, records: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(records))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
