"""Compressed 2:4 storage: kept values plus a 2-bit in-group index per value.

Binary layout (all little-endian)::

    b"P24\\0"  version:u16  n:u32  m:u32
    values   n*(m/2) float64, row-major, in group order
    indices  n*(m/2) 2-bit codes, row-major, 4 codes per byte
             (code k of a byte sits at bits 2k..2k+1), last byte zero-padded
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from suslab.errors import DimensionError, InvariantError
from suslab.sparsity import GROUP, KEEP, as_matrix, check_24_mask

MAGIC = b"P24\0"
VERSION = 1
_HEADER = struct.Struct("<4sHII")


@dataclass
class Packed24:
    rows: int
    cols: int
    values: np.ndarray   # (rows, cols // 2) float64
    indices: np.ndarray  # (rows, cols // 2) uint8, each in 0..3

    def __post_init__(self):
        shape = (self.rows, self.cols // 2)
        if self.cols % GROUP or self.values.shape != shape or self.indices.shape != shape:
            raise DimensionError("packed arrays do not match (rows, cols/2)")
        pairs = self.indices.reshape(self.rows, -1, KEEP)
        if np.any(self.indices > 3) or np.any(pairs[..., 0] >= pairs[..., 1]):
            raise InvariantError("index codes must be strictly increasing within each group")

    def __eq__(self, other):
        if not isinstance(other, Packed24):
            return NotImplemented
        return (
            self.rows == other.rows
            and self.cols == other.cols
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.indices, other.indices)
        )


def pack(w, mask) -> Packed24:
    arr = as_matrix(w)
    bits = np.asarray(mask)
    if bits.shape != arr.shape:
        raise DimensionError(f"mask shape {bits.shape} does not match weights {arr.shape}")
    bits = check_24_mask(bits)
    n, m = arr.shape
    # row-major nonzero order visits each group's two kept positions in ascending order
    rows, cols = np.nonzero(bits)
    values = arr[rows, cols].reshape(n, m // 2).copy()
    indices = (cols % GROUP).astype(np.uint8).reshape(n, m // 2)
    return Packed24(n, m, values, indices)


def _columns(pk: Packed24) -> np.ndarray:
    base = (np.arange(pk.cols // 2) // KEEP) * GROUP
    return base[None, :] + pk.indices.astype(np.int64)


def unpack(pk: Packed24) -> np.ndarray:
    out = np.zeros((pk.rows, pk.cols), dtype=np.float64)
    np.put_along_axis(out, _columns(pk), pk.values, axis=1)
    return out


def sparse_matvec(pk: Packed24, x) -> np.ndarray:
    """``(W ⊙ M) @ x`` computed from the packed form by gathering two inputs per group."""
    vec = np.asarray(x, dtype=np.float64)
    if vec.shape != (pk.cols,):
        raise DimensionError(f"input length {vec.shape} does not match {pk.cols} columns")
    return np.sum(pk.values * vec[_columns(pk)], axis=1)


def to_bytes(pk: Packed24) -> bytes:
    codes = pk.indices.ravel().astype(np.uint8)
    pad = (-codes.size) % 4
    codes = np.concatenate([codes, np.zeros(pad, dtype=np.uint8)]).reshape(-1, 4)
    packed = codes[:, 0] | (codes[:, 1] << 2) | (codes[:, 2] << 4) | (codes[:, 3] << 6)
    return (
        _HEADER.pack(MAGIC, VERSION, pk.rows, pk.cols)
        + pk.values.astype("<f8").tobytes()
        + packed.astype(np.uint8).tobytes()
    )


def from_bytes(buf: bytes) -> Packed24:
    if len(buf) < _HEADER.size:
        raise InvariantError("truncated packed header")
    magic, version, n, m = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise InvariantError(f"bad magic {magic!r}")
    if version != VERSION:
        raise InvariantError(f"unsupported packed version {version}")
    count = n * (m // 2)
    offset = _HEADER.size
    nbytes = (count + 3) // 4
    if len(buf) != offset + 8 * count + nbytes:
        raise InvariantError("packed payload length does not match header")
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).astype(np.float64)
    raw = np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=offset + 8 * count)
    codes = np.stack([(raw >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).ravel()[:count]
    return Packed24(n, m, values.reshape(n, m // 2), codes.astype(np.uint8).reshape(n, m // 2))


def save(path, pk: Packed24) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(pk))


def load(path) -> Packed24:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
