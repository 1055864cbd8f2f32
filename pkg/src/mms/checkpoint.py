"""Checkpoint serialisation.

Layout (all integers little-endian)::

    b"MMS1"                      magic
    u32 version                  currently 1
    u32 count                    number of tensors
    count times:
        u32 name_len, name (utf-8)
        u8  dtype tag            1 = float32, 2 = float64
        u32 rank, rank x u32 dims
        raw little-endian data, row-major

Entries keep their insertion order, so ``encode(decode(b)) == b``.
"""

import os
import struct

import numpy as np

MAGIC = b"MMS1"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_OF = {"float32": 1, "float64": 2}


class CheckpointError(ValueError):
    pass


def encode(tensors, dtype=None):
    """Serialise ``name -> array``; ``dtype`` forces every entry to float32/float64."""
    out = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        kind = dtype or ("float32" if arr.dtype == np.float32 else "float64")
        tag = TAG_OF[kind]
        raw = np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag])
        bname = name.encode("utf-8")
        out.append(struct.pack("<I", len(bname)))
        out.append(bname)
        out.append(struct.pack("<BI", tag, raw.ndim))
        out.append(struct.pack(f"<{raw.ndim}I", *raw.shape))
        out.append(raw.tobytes())
    return b"".join(out)


def decode(buf):
    if buf[:4] != MAGIC:
        raise CheckpointError("not an MMS checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 12
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}I", buf, pos)
            pos += 4 * rank
            dt = DTYPE_TAGS.get(tag)
            if dt is None:
                raise CheckpointError(f"{name}: unknown dtype tag {tag}")
            n = int(np.prod(dims)) if dims else 1
            if pos + n * dt.itemsize > len(buf):
                raise CheckpointError(f"{name}: truncated data")
            tensors[name] = np.frombuffer(buf, dtype=dt, count=n, offset=pos).reshape(dims).copy()
            pos += n * dt.itemsize
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(buf):
        raise CheckpointError("trailing bytes after last tensor")
    return tensors


def save(path, tensors, dtype=None):
    data = encode(tensors, dtype)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load(path):
    try:
        with open(path, "rb") as fh:
            return decode(fh.read())
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {os.fspath(path)}: {exc}") from exc
