"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"WSODCKPT1"
    repeated until end of file:
        uint32   name length in bytes
        bytes    UTF-8 name
        uint32   rank
        uint64   dimension, ``rank`` times
        float64  values in row-major order
"""
import struct

import numpy as np

MAGIC = b"WSODCKPT1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        for name, value in tensors.items():
            arr = np.array(value, dtype="<f8", order="C")  # keeps rank 0, unlike ascontiguousarray
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: missing {MAGIC!r} header")
    pos = len(MAGIC)
    out = {}
    try:
        while pos < len(blob):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            count = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * count > len(blob):
                raise CheckpointError(f"{path}: tensor {name!r} truncated")
            out[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape).copy()
            pos += 8 * count
    except struct.error as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint ({exc})") from exc
    return out
