"""Binary tensor file format.

Layout, all little-endian: magic b"AFAT", version u16 (=1), rank u16,
one u32 extent per axis, then the float32 payload in row-major order.
Values are widened to float64 on load.
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import MAX_RANK, Tensor

MAGIC = b"AFAT"
VERSION = 1


class TensorFormatError(ValueError):
    """Malformed tensor file; message carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_tensor_file(path, t: Tensor) -> None:
    arr = np.asarray(t.data, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HH", VERSION, arr.ndim))
        for extent in arr.shape:
            fh.write(struct.pack("<I", extent))
        fh.write(arr.tobytes(order="C"))


def load_tensor_file(path) -> Tensor:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}, expected {MAGIC!r}", 0)
    if len(blob) < 8:
        raise TensorFormatError("truncated header", len(blob))
    version, rank = struct.unpack_from("<HH", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", 4)
    if rank > MAX_RANK:
        raise TensorFormatError(f"rank {rank} exceeds supported rank {MAX_RANK}", 6)
    offset = 8
    shape = []
    for _ in range(rank):
        if offset + 4 > len(blob):
            raise TensorFormatError("truncated extents", offset)
        shape.append(struct.unpack_from("<I", blob, offset)[0])
        offset += 4
    count = 1
    for extent in shape:
        count *= extent
    need = count * 4
    if len(blob) - offset != need:
        raise TensorFormatError(
            f"payload holds {len(blob) - offset} bytes, expected {need}", offset)
    payload = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    return Tensor(payload.astype(np.float64).reshape(shape))
