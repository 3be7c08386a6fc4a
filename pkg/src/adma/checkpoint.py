"""Binary checkpoint format.

Layout: magic ``b"ADMA"``, u32 format version, then records until EOF:
u32 name length, UTF-8 name, u32 rank, ``rank`` u32 extents, raw little-endian
f64 payload.  All integers little-endian.
"""

from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import Mapping, Union

import numpy as np

MAGIC = b"ADMA"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(arrays: Mapping[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for name, arr in arrays.items():
        arr = np.array(arr, dtype="<f8", order="C")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict:
    if blob[:4] != MAGIC:
        raise CheckpointError("not an ADMA checkpoint (bad magic)")
    if len(blob) < 8:
        raise CheckpointError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = {}
    pos = 8
    try:
        while pos < len(blob):
            (n,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            shape = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            count = int(np.prod(shape)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(blob):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos)
            out[name] = arr.reshape(shape).astype(np.float64)
            pos += nbytes
    except struct.error as e:
        raise CheckpointError(f"truncated checkpoint record: {e}") from None
    return out


def save(path: Union[str, Path], arrays: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(arrays))


def load(path: Union[str, Path]) -> dict:
    return loads(Path(path).read_bytes())
