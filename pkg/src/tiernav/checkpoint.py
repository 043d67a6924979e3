"""Flat binary checkpoint container.

Holds a string->string metadata section and a name->float64-array
section. Keys are written sorted and there are no timestamps, so the
same arrays always produce the same bytes (unlike zip-based formats),
and round-trips are bit-exact.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .errors import ContractError

MAGIC = b"TNCKPT01"


def save_checkpoint(path, arrays: dict, meta: dict | None = None):
    meta = dict(meta or {})
    chunks = [MAGIC]
    chunks.append(struct.pack("<I", len(meta)))
    for key in sorted(meta):
        kb = key.encode("utf-8")
        vb = str(meta[key]).encode("utf-8")
        chunks.append(struct.pack("<I", len(kb)) + kb + struct.pack("<I", len(vb)) + vb)
    chunks.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype=np.float64)
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)) + nb)
        chunks.append(struct.pack("<I", arr.ndim))
        if arr.ndim:
            chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    blob = b"".join(chunks)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ContractError(f"{path}: not a checkpoint file (bad magic)")
    off = 8

    def take(n):
        nonlocal off
        out = blob[off : off + n]
        if len(out) != n:
            raise ContractError(f"{path}: truncated checkpoint")
        off += n
        return out

    def take_u32():
        return struct.unpack("<I", take(4))[0]

    meta = {}
    for _ in range(take_u32()):
        key = take(take_u32()).decode("utf-8")
        meta[key] = take(take_u32()).decode("utf-8")
    arrays = {}
    for _ in range(take_u32()):
        name = take(take_u32()).decode("utf-8")
        ndim = take_u32()
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape).copy()
    if off != len(blob):
        raise ContractError(f"{path}: {len(blob) - off} trailing bytes in checkpoint")
    return arrays, meta
