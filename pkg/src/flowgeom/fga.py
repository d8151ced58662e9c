"""FGA1 array blobs: magic 'FGA1', u32 LE rank, rank x u32 LE extents,
then row-major 32-bit little-endian IEEE floats."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"FGA1"


class FgaError(IOError):
    pass


def write_fga(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f4", order="C")  # keeps 0-d rank 0
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_fga(path) -> np.ndarray:
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise FgaError(f"{path}: bad magic {magic!r}")
        (rank,) = struct.unpack("<I", f.read(4))
        if rank > 16:
            raise FgaError(f"{path}: implausible rank {rank}")
        shape = struct.unpack(f"<{rank}I", f.read(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise FgaError(f"{path}: truncated payload "
                           f"({len(payload)} of {4 * count} bytes)")
        extra = f.read(1)
        if extra:
            raise FgaError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
