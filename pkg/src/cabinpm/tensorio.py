"""Binary tensor serialization shared by dataset files and checkpoints.

Layout per tensor, little-endian throughout:

    u32 rank | u64 dims[rank] | row-major float64 payload

Multiple tensors may be concatenated in one stream; readers consume them
in order.
"""

from __future__ import annotations

import struct
from typing import BinaryIO

import numpy as np

from .errors import TruncatedError


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    fh.write(struct.pack("<I", arr.ndim))
    for d in arr.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(arr.astype("<f8").tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise TruncatedError(f"expected {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    (rank,) = struct.unpack("<I", _read_exact(fh, 4))
    dims = [struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)]
    count = int(np.prod(dims)) if dims else 1
    payload = _read_exact(fh, count * 8)
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return arr.reshape(dims)


def tensor_bytes(arr: np.ndarray) -> bytes:
    """The serialized form of one tensor as a bytes object."""
    import io

    buf = io.BytesIO()
    write_tensor(buf, arr)
    return buf.getvalue()
