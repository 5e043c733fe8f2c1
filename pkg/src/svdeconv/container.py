"""Binary named-array container ("SVC1").

Layout, all integers little-endian::

    b"SVC1" | u64 record_count
    per record: u64 name_len | name (UTF-8) | u64 rank | rank x u64 dims
                | u8 precision tag | raw row-major values

Precision tags: 1 = float64, 2 = float32, 3 = uint8 (opaque bytes, used for
JSON metadata), 4 = int64.
"""
from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

MAGIC = b"SVC1"
TAGS = {1: np.dtype("<f8"), 2: np.dtype("<f4"), 3: np.dtype("u1"), 4: np.dtype("<i8")}
_TAG_OF = {np.dtype("float64"): 1, np.dtype("float32"): 2, np.dtype("uint8"): 3, np.dtype("int64"): 4}


class ContainerError(ValueError):
    pass


def encode_meta(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8).copy()


def decode_meta(arr: np.ndarray):
    return json.loads(bytes(np.asarray(arr, dtype=np.uint8)).decode("utf-8"))


def dumps(records: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<Q", len(records))]
    for name, value in records.items():
        arr = np.asarray(value)
        if arr.dtype not in _TAG_OF:
            if arr.dtype.kind in "iub":
                arr = arr.astype(np.int64)
            else:
                raise ContainerError(f"record {name!r}: unsupported dtype {arr.dtype}")
        tag = _TAG_OF[arr.dtype]
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw_name)))
        parts.append(raw_name)
        parts.append(struct.pack("<Q", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(struct.pack("<B", tag))
        parts.append(np.ascontiguousarray(arr, dtype=TAGS[tag]).tobytes())
    return b"".join(parts)


def loads(blob: bytes, source: str = "<bytes>") -> Dict[str, np.ndarray]:
    mv = memoryview(blob)
    if bytes(mv[:4]) != MAGIC:
        raise ContainerError(f"{source}: bad magic {bytes(mv[:4])!r}")
    pos = 4

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(mv):
            raise ContainerError(f"{source}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, mv, pos)
        pos += size
        return vals

    (count,) = take("<Q")
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<Q")
        name = bytes(mv[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (rank,) = take("<Q")
        dims = take(f"<{rank}Q") if rank else ()
        (tag,) = take("<B")
        if tag not in TAGS:
            raise ContainerError(f"{source}: record {name!r} has unknown precision tag {tag}")
        dt = TAGS[tag]
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        nbytes = n * dt.itemsize
        if pos + nbytes > len(mv):
            raise ContainerError(f"{source}: record {name!r} truncated")
        arr = np.frombuffer(mv[pos:pos + nbytes], dtype=dt).reshape(dims).copy()
        pos += nbytes
        out[name] = arr.astype(dt.newbyteorder("="), copy=False)
    return out


def write_container(path, records: Mapping[str, np.ndarray]) -> None:
    path = Path(path)
    blob = dumps(records)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except OSError as exc:
        raise OSError(f"writing container {path}: {exc}") from exc


def read_container(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"reading container {path}: {exc}") from exc
    return loads(blob, source=str(path))
