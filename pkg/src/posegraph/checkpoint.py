"""Binary tensor archives.

Layout (all integers little-endian u32 unless noted):

    magic   4 bytes  b"GRPT"
    version u32      currently 1
    count   u32      number of named tensors
    then per tensor:
        name_len u32, name bytes (UTF-8)
        rank     u32
        dims     u32 * rank
        payload  float32 * prod(dims), little-endian, row-major

Writes go to a temp file in the same directory and are renamed into place,
so a crash never leaves a partial checkpoint behind. Round-trips are
bit-exact.
"""

from __future__ import annotations

import hashlib
import os
import struct
from typing import Dict

import numpy as np

from .errors import CheckpointFormatError, MissingArtifact

MAGIC = b"GRPT"
VERSION = 1


def save_checkpoint(path: str | os.PathLike, tensors: Dict[str, np.ndarray]) -> None:
    path = os.fspath(path)
    blobs = [struct.pack("<4sII", MAGIC, VERSION, len(tensors))]
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        raw = name.encode("utf-8")
        blobs.append(struct.pack("<I", len(raw)))
        blobs.append(raw)
        blobs.append(struct.pack("<I", arr.ndim))
        blobs.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        blobs.append(arr.tobytes())
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(blobs))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Dict[str, np.ndarray]:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise MissingArtifact(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        buf = fh.read()

    def need(offset: int, n: int) -> None:
        if offset + n > len(buf):
            raise CheckpointFormatError(f"truncated checkpoint {path}", offset)

    need(0, 12)
    magic, version, count = struct.unpack_from("<4sII", buf, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} in {path}", 0)
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version} in {path}", 4)
    pos = 12
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        need(pos, 4)
        (name_len,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, name_len)
        name = buf[pos:pos + name_len].decode("utf-8")
        pos += name_len
        need(pos, 4)
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(pos, 4 * rank)
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(pos, 4 * n)
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(dims)
        out[name] = arr.astype(np.float32)  # own, writable copy
        pos += 4 * n
    if pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - pos} trailing bytes in {path}", pos)
    return out


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
