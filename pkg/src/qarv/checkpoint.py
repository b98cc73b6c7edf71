"""Self-describing binary store for named arrays.

Layout (all integers little-endian):

    magic "QARVCKPT" | format version u16 | record count u32 |
    per record: name length u16, UTF-8 name, dtype tag u8, rank u8,
                extents u32 each, raw little-endian values

Dtype tags: 0 = float32, 1 = float64, 2 = uint8 (raw bytes), 3 = int64.
EMA shadows live under "<param>/ema"; optimizer moments under
"<param>/adam_m" and "/adam_v"; the serialized model config under
"__config__" and the optimizer step counter under "__step__".
"""

from __future__ import annotations

import struct
from typing import Mapping

import numpy as np

MAGIC = b"QARVCKPT"
FORMAT_VERSION = 1

_TAG_TO_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("u1"), 3: np.dtype("<i8")}
_DTYPE_TO_TAG = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
                 np.dtype(np.uint8): 2, np.dtype(np.int64): 3}


class CheckpointError(ValueError):
    pass


def save_arrays(path: str, arrays: Mapping[str, np.ndarray]) -> None:
    names = list(arrays)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate record names")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(names)))
        for name in names:
            arr = np.asarray(arrays[name])
            if arr.dtype not in _DTYPE_TO_TAG:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<BB", _DTYPE_TO_TAG[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_arrays(path: str) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    off = len(MAGIC)

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(blob):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, blob, off)
        off += size
        return vals

    version, count = take("<HI")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = take("<H")
        if off + name_len > len(blob):
            raise CheckpointError("truncated checkpoint")
        name = blob[off:off + name_len].decode("utf-8")
        off += name_len
        tag, rank = take("<BB")
        if tag not in _TAG_TO_DTYPE:
            raise CheckpointError(f"unknown dtype tag {tag}")
        shape = take(f"<{rank}I") if rank else ()
        dtype = _TAG_TO_DTYPE[tag]
        count_elems = int(np.prod(shape, dtype=np.int64)) if rank else 1  # rank 0 is a scalar
        nbytes = dtype.itemsize * count_elems
        if off + nbytes > len(blob):
            raise CheckpointError("truncated checkpoint")
        arr = np.frombuffer(blob, dtype=dtype, count=count_elems, offset=off).reshape(shape)
        off += nbytes
        if name in out:
            raise CheckpointError(f"duplicate record {name!r}")
        out[name] = arr.copy()
    return out
