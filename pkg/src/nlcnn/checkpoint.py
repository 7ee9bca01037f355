"""Binary "NLCK" container of named dense arrays.

Layout (little-endian): magic ``NLCK``, u32 format version, u32 record count,
then per record: u32 name length, UTF-8 name, u8 dtype code (0=f32, 1=f64),
u32 rank, rank x u64 dims, raw payload.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"NLCK"
FORMAT_VERSION = 1
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_DTYPES = {v: k for k, v in _CODES.items()}


class ContainerError(ValueError):
    pass


def encode(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(records))]
    for name, value in records.items():
        arr = np.asarray(value)
        if arr.dtype.kind == "f" and arr.dtype.byteorder not in ("=", "|"):
            arr = arr.astype(arr.dtype.newbyteorder("="))
        if arr.dtype not in _CODES:
            raise ContainerError(f"record {name!r}: unsupported dtype {arr.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<BI", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> Dict[str, np.ndarray]:
    view = memoryview(blob)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise ContainerError(f"truncated container while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise ContainerError("not an NLCK container (bad magic)")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported container version {version}")
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, f"record {i} name length"))
        try:
            name = bytes(take(name_len, f"record {i} name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ContainerError(f"record {i}: name is not UTF-8") from exc
        code, rank = struct.unpack("<BI", take(5, f"record {name!r} header"))
        if code not in _DTYPES:
            raise ContainerError(f"record {name!r}: unknown dtype code {code}")
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, f"record {name!r} dims"))
        dtype = _DTYPES[code].newbyteorder("<")
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        payload = take(nbytes, f"record {name!r} payload")
        if name in out:
            raise ContainerError(f"duplicate record name {name!r}")
        out[name] = np.frombuffer(payload, dtype=dtype).astype(_DTYPES[code]).reshape(dims)
    if pos != len(view):
        raise ContainerError(f"{len(view) - pos} trailing bytes after last record")
    return out


def save(path, records: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename)."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(records))
    os.replace(tmp, path)


def load(path) -> Dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())
