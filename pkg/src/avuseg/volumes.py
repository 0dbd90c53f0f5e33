"""Probability, label and uncertainty volumes and the UEVOL1 file format.

Arrays are stored x-fastest, i.e. a volume of dims (X, Y, Z) is held in numpy
as shape ``(Z, Y, X)`` (C-order), and a probability volume as
``(Z, Y, X, C)`` so the class index varies fastest on disk.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"UEVOL1"
HEADER = struct.Struct("<6sBB4I")

KIND_PROB, KIND_LABEL, KIND_UNCERTAINTY, KIND_IMAGE = 0, 1, 2, 3
DTYPE_F32, DTYPE_F64, DTYPE_U8 = 0, 1, 2
_NP_DTYPES = {DTYPE_F32: np.dtype("<f4"), DTYPE_F64: np.dtype("<f8"), DTYPE_U8: np.dtype("u1")}
_CODES = {np.dtype("float32"): DTYPE_F32, np.dtype("float64"): DTYPE_F64, np.dtype("uint8"): DTYPE_U8}

SIMPLEX_TOL = 1e-5


class VolumeError(ValueError):
    """Base class for volume validation and I/O errors."""


class InvariantError(VolumeError):
    pass


class BadMagicError(VolumeError):
    pass


class TruncatedError(VolumeError):
    pass


class ChecksumError(VolumeError):
    pass


# ------------------------------------------------------------------ CRC-64

def _crc64_table() -> list[int]:
    poly = 0xC96C5795D7870F42  # ECMA-182, reflected (CRC-64/XZ)
    table = []
    for byte in range(256):
        crc = byte
        for _ in range(8):
            crc = (crc >> 1) ^ poly if crc & 1 else crc >> 1
        table.append(crc)
    return table


_CRC_TABLE = _crc64_table()


def crc64(data: bytes, crc: int = 0) -> int:
    """CRC-64/XZ. ``crc64(b"123456789") == 0x995DC9BBDF1939FA``."""
    table = _CRC_TABLE
    crc ^= 0xFFFFFFFFFFFFFFFF
    for b in memoryview(data).cast("B"):
        crc = table[(crc ^ b) & 0xFF] ^ (crc >> 8)
    return crc ^ 0xFFFFFFFFFFFFFFFF


# ------------------------------------------------------------------ types

@dataclass(frozen=True, eq=False)
class ProbVolume:
    """Per-voxel class probabilities, array shape (Z, Y, X, C)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 4:
            raise InvariantError(f"ProbVolume needs a 4D (Z, Y, X, C) array, got {data.shape}")
        if data.shape[-1] < 2:
            raise InvariantError(f"ProbVolume needs C >= 2, got C={data.shape[-1]}")
        if np.any(data < 0) or np.any(data > 1) or not np.all(np.isfinite(data)):
            raise InvariantError("ProbVolume entries must lie in [0, 1]")
        dev = np.abs(data.sum(axis=-1, dtype=np.float64) - 1.0)
        if dev.size and dev.max() > SIMPLEX_TOL:
            raise InvariantError(f"ProbVolume class vectors must sum to 1 (max deviation {dev.max():.3g})")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x, _ = self.data.shape
        return x, y, z

    @property
    def num_classes(self) -> int:
        return self.data.shape[-1]


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """Integer class index per voxel, array shape (Z, Y, X)."""

    data: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise InvariantError(f"LabelVolume needs a 3D (Z, Y, X) array, got {data.shape}")
        if data.size and (data.min() < 0 or data.max() > 255):
            raise InvariantError("LabelVolume indices must lie in [0, 255]")
        data = data.astype(np.uint8)
        if self.num_classes is not None and data.size and data.max() >= self.num_classes:
            raise InvariantError(f"label {int(data.max())} >= num_classes {self.num_classes}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x = self.data.shape
        return x, y, z


@dataclass(frozen=True, eq=False)
class UncertaintyVolume:
    """Normalized entropy per voxel in [0, 1], array shape (Z, Y, X)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 3:
            raise InvariantError(f"UncertaintyVolume needs a 3D array, got {data.shape}")
        if np.any(data < 0) or np.any(data > 1) or not np.all(np.isfinite(data)):
            raise InvariantError("UncertaintyVolume values must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x = self.data.shape
        return x, y, z


@dataclass(frozen=True, eq=False)
class ImageVolume:
    """Scalar intensities per voxel (network input), array shape (Z, Y, X)."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.dtype not in (np.float32, np.float64):
            data = data.astype(np.float64)
        if data.ndim != 3:
            raise InvariantError(f"ImageVolume needs a 3D array, got {data.shape}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def dims(self) -> tuple[int, int, int]:
        z, y, x = self.data.shape
        return x, y, z


Volume = ProbVolume | LabelVolume | UncertaintyVolume | ImageVolume


def argmax_labels(probs: ProbVolume) -> LabelVolume:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return LabelVolume(np.argmax(probs.data, axis=-1), num_classes=probs.num_classes)


# --------------------------------------------------------------------- I/O

def _kind_of(vol) -> int:
    if isinstance(vol, ProbVolume):
        return KIND_PROB
    if isinstance(vol, LabelVolume):
        return KIND_LABEL
    if isinstance(vol, UncertaintyVolume):
        return KIND_UNCERTAINTY
    if isinstance(vol, ImageVolume):
        return KIND_IMAGE
    raise TypeError(f"not a volume: {type(vol).__name__}")


def encode_volume(vol: Volume) -> bytes:
    kind = _kind_of(vol)
    x, y, z = vol.dims
    if kind == KIND_PROB:
        c = vol.num_classes
    elif kind == KIND_LABEL:
        c = vol.num_classes if vol.num_classes is not None else max(2, int(vol.data.max(initial=0)) + 1)
    else:
        c = 1
    code = _CODES[vol.data.dtype]
    payload = np.ascontiguousarray(vol.data, dtype=_NP_DTYPES[code]).tobytes()
    return HEADER.pack(MAGIC, kind, code, x, y, z, c) + payload + struct.pack("<Q", crc64(payload))


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < len(MAGIC) or buf[:len(MAGIC)] != MAGIC:
        raise BadMagicError("missing UEVOL1 magic")
    if len(buf) < HEADER.size:
        raise TruncatedError("header truncated")
    _, kind, code, x, y, z, c = HEADER.unpack_from(buf)
    if code not in _NP_DTYPES:
        raise InvariantError(f"unknown dtype code {code}")
    if kind not in (KIND_PROB, KIND_LABEL, KIND_UNCERTAINTY, KIND_IMAGE):
        raise InvariantError(f"unknown volume kind {kind}")
    if kind in (KIND_PROB, KIND_LABEL) and c < 2:
        raise InvariantError(f"C must be >= 2, header declares C={c}")
    dtype = _NP_DTYPES[code]
    per_voxel = c if kind == KIND_PROB else 1
    nbytes = x * y * z * per_voxel * dtype.itemsize
    end = HEADER.size + nbytes
    if len(buf) < end + 8:
        raise TruncatedError(f"payload truncated: need {end + 8} bytes, have {len(buf)}")
    payload = buf[HEADER.size:end]
    (stored,) = struct.unpack_from("<Q", buf, end)
    if crc64(payload) != stored:
        raise ChecksumError("payload CRC64 mismatch")
    arr = np.frombuffer(payload, dtype=dtype)
    if kind == KIND_PROB:
        return ProbVolume(arr.reshape(z, y, x, c).astype(dtype.newbyteorder("=")))
    if kind == KIND_LABEL:
        if code != DTYPE_U8:
            raise InvariantError("label volumes must be stored as u8")
        return LabelVolume(arr.reshape(z, y, x).copy(), num_classes=c)
    arr = arr.reshape(z, y, x).astype(dtype.newbyteorder("="))
    return UncertaintyVolume(arr) if kind == KIND_UNCERTAINTY else ImageVolume(arr)


def write_volume(vol: Volume, path) -> int:
    """Write atomically; returns the payload CRC64."""
    blob = encode_volume(vol)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    return struct.unpack_from("<Q", blob, len(blob) - 8)[0]


def read_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())
