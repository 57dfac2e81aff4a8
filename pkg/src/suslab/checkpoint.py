"""Binary checkpoints: little-endian, explicit shapes, no pickling.

Layout::

    b"SUSC" version:u16
    phase:str  config_hash:str           (str = u16 byte length + utf-8)
    n_layers:u32 fc_head:u32
    per layer:
        activation:u8 (0 relu, 1 none)  flags:u8 (1 mask, 2 perm, 4 magnitude)
        weight: matrix   bias: u32 length + float64 values
        [mask: bitmatrix] [perm: u32 length + u32 values] [l1_pruned:f64 l1_upper:f64]

    matrix    = rows:u32 cols:u32 then rows*cols float64, row-major
    bitmatrix = rows:u32 cols:u32 then rows*cols uint8 (0/1), row-major
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Optional

import numpy as np

from suslab.errors import InvariantError
from suslab.net import Layer, Network
from suslab.sparsity import MagnitudeReport

MAGIC = b"SUSC"
VERSION = 1
PHASES = ("initial", "backdoored", "released", "sparse", "finetuned")
_ACT = {"relu": 0, "none": 1}
_ACT_NAME = {v: k for k, v in _ACT.items()}
F_MASK, F_PERM, F_MAG = 1, 2, 4


def _read(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise InvariantError("truncated checkpoint")
    return buf


def _u(fh: BinaryIO, fmt: str):
    s = struct.Struct("<" + fmt)
    return s.unpack(_read(fh, s.size))


def write_matrix(fh: BinaryIO, arr: np.ndarray) -> None:
    rows, cols = arr.shape
    fh.write(struct.pack("<II", rows, cols))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_matrix(fh: BinaryIO) -> np.ndarray:
    rows, cols = _u(fh, "II")
    return np.frombuffer(_read(fh, 8 * rows * cols), dtype="<f8").astype(np.float64).reshape(rows, cols)


def write_bitmatrix(fh: BinaryIO, bits: np.ndarray) -> None:
    rows, cols = bits.shape
    fh.write(struct.pack("<II", rows, cols))
    fh.write(np.ascontiguousarray(bits, dtype=np.uint8).tobytes())


def read_bitmatrix(fh: BinaryIO) -> np.ndarray:
    rows, cols = _u(fh, "II")
    bits = np.frombuffer(_read(fh, rows * cols), dtype=np.uint8).reshape(rows, cols).copy()
    if np.any(bits > 1):
        raise InvariantError("mask entries must be 0 or 1")
    return bits


def _write_str(fh: BinaryIO, s: str) -> None:
    raw = s.encode()
    fh.write(struct.pack("<H", len(raw)) + raw)


def _read_str(fh: BinaryIO) -> str:
    (n,) = _u(fh, "H")
    return _read(fh, n).decode()


def _write_vec(fh: BinaryIO, v: np.ndarray, dtype: str) -> None:
    fh.write(struct.pack("<I", len(v)))
    fh.write(np.ascontiguousarray(v, dtype=dtype).tobytes())


def _read_vec(fh: BinaryIO, dtype: str) -> np.ndarray:
    (n,) = _u(fh, "I")
    item = np.dtype(dtype).itemsize
    return np.frombuffer(_read(fh, n * item), dtype=dtype)


@dataclass
class Checkpoint:
    net: Network
    phase: str
    config_hash: str = ""
    masks: Optional[list[Optional[np.ndarray]]] = None
    magnitudes: Optional[list[Optional[MagnitudeReport]]] = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise InvariantError(f"unknown phase tag {self.phase!r}")


def to_bytes(ck: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC + struct.pack("<H", VERSION))
    _write_str(fh, ck.phase)
    _write_str(fh, ck.config_hash)
    net = ck.net
    fh.write(struct.pack("<II", len(net.layers), net.fc_head))
    for k, layer in enumerate(net.layers):
        mask = ck.masks[k] if ck.masks else None
        mag = ck.magnitudes[k] if ck.magnitudes else None
        flags = (F_MASK if mask is not None else 0) | (F_PERM if layer.input_perm is not None else 0) \
            | (F_MAG if mag is not None else 0)
        fh.write(struct.pack("<BB", _ACT[layer.activation], flags))
        write_matrix(fh, layer.weight)
        _write_vec(fh, layer.bias, "<f8")
        if mask is not None:
            write_bitmatrix(fh, mask)
        if layer.input_perm is not None:
            _write_vec(fh, layer.input_perm, "<u4")
        if mag is not None:
            fh.write(struct.pack("<dd", mag.l1_pruned, mag.l1_upper))
    return fh.getvalue()


def from_bytes(buf: bytes) -> Checkpoint:
    fh = io.BytesIO(buf)
    if _read(fh, 4) != MAGIC:
        raise InvariantError("not a checkpoint file")
    (version,) = _u(fh, "H")
    if version != VERSION:
        raise InvariantError(f"unsupported checkpoint version {version}")
    phase = _read_str(fh)
    config_hash = _read_str(fh)
    n_layers, fc_head = _u(fh, "II")
    layers, masks, mags = [], [], []
    for _ in range(n_layers):
        act, flags = _u(fh, "BB")
        weight = read_matrix(fh)
        bias = _read_vec(fh, "<f8").astype(np.float64)
        mask = read_bitmatrix(fh) if flags & F_MASK else None
        perm = _read_vec(fh, "<u4").astype(np.int64) if flags & F_PERM else None
        mag = None
        if flags & F_MAG:
            pruned, upper = _u(fh, "dd")
            mag = MagnitudeReport(pruned, upper, 1.0 if upper == 0 else pruned / upper)
        layers.append(Layer(weight, bias, _ACT_NAME[act], perm))
        masks.append(mask)
        mags.append(mag)
    if fh.read(1):
        raise InvariantError("trailing bytes after checkpoint")
    return Checkpoint(
        Network(layers, fc_head=fc_head), phase, config_hash,
        masks if any(m is not None for m in masks) else None,
        mags if any(m is not None for m in mags) else None,
    )


def save(path, ck: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(ck))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
