"""Binary tensor container.

Layout, all little-endian: magic ``VLABTNSR`` (8 bytes), u32 rank, rank
u32 dims, then the row-major float32 payload. Writes are bit-exact for
identical inputs.
"""

from __future__ import annotations

import struct

import numpy as np

from ..errors import DataError

MAGIC = b"VLABTNSR"


def write_tensor(f, array: np.ndarray) -> None:
    """Serialize one array to an open binary file object."""
    # ascontiguousarray would promote rank-0 arrays to rank 1
    arr = np.asarray(array, dtype="<f4")
    if not arr.flags.c_contiguous:
        arr = arr.copy()
    f.write(MAGIC)
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f) -> np.ndarray:
    """Read one array record; returns float32 with the stored shape."""
    magic = f.read(8)
    if magic != MAGIC:
        raise DataError(f"bad tensor magic {magic!r}, expected {MAGIC!r}")
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
    count = int(np.prod(dims)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise DataError("truncated tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def save_tensor(path, array: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, array)


def load_tensor(path) -> np.ndarray:
    try:
        with open(path, "rb") as f:
            return read_tensor(f)
    except FileNotFoundError:
        raise DataError(f"tensor file not found: {path}")
