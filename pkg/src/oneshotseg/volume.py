"""Volume / label-map containers and the RRLV binary file format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"RRLV"
VERSION = 1
DTYPE_F32 = 0
DTYPE_U8 = 1
_HEADER = struct.Struct("<4sIIIIII")


class VolumeFormatError(ValueError):
    """Base class for malformed RRLV files."""


class BadMagicError(VolumeFormatError):
    pass


class BadVersionError(VolumeFormatError):
    pass


class DTypeMismatchError(VolumeFormatError):
    pass


class PayloadSizeError(VolumeFormatError):
    """Payload shorter or longer than the header's dims imply."""


class LabelRangeError(VolumeFormatError):
    """A stored label is >= the declared number of classes."""


def _dims3(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(eq=False)
class Volume:
    data: np.ndarray  # float32, shape (D, H, W)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {self.data.shape}")
        _dims3(self.data.shape)
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        return isinstance(other, Volume) and self.data.tobytes() == other.data.tobytes() \
            and self.dims == other.dims


@dataclass(eq=False)
class LabelMap:
    data: np.ndarray  # uint8, shape (D, H, W)
    num_classes: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ValueError(f"label data must be 3-D, got shape {self.data.shape}")
        _dims3(self.data.shape)
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.data.size and int(self.data.max()) >= self.num_classes:
            raise LabelRangeError(
                f"label {int(self.data.max())} >= num_classes {self.num_classes}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)

    def __eq__(self, other):
        return isinstance(other, LabelMap) and self.num_classes == other.num_classes \
            and self.dims == other.dims and self.data.tobytes() == other.data.tobytes()


@dataclass
class AtlasPair:
    image: Volume
    labels: LabelMap

    def __post_init__(self):
        if self.image.dims != self.labels.dims:
            raise ValueError(f"atlas dims differ: {self.image.dims} vs {self.labels.dims}")


def _write(path, dtype_code: int, num_classes: int, dims, payload: bytes) -> None:
    header = _HEADER.pack(MAGIC, VERSION, dtype_code, num_classes, *dims)
    Path(path).write_bytes(header + payload)


def _read(path, dtype_code: int):
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise PayloadSizeError(f"{path}: file shorter than header")
    magic, version, dtype, num_classes, d, h, w = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"{path}: unsupported version {version}")
    if dtype != dtype_code:
        raise DTypeMismatchError(f"{path}: dtype {dtype}, expected {dtype_code}")
    return raw[_HEADER.size:], num_classes, (d, h, w)


def write_volume(path, v: Volume) -> None:
    _write(path, DTYPE_F32, 0, v.dims, v.data.astype("<f4").tobytes())


def read_volume(path) -> Volume:
    payload, num_classes, dims = _read(path, DTYPE_F32)
    if num_classes != 0:
        raise DTypeMismatchError(f"{path}: scalar image must declare num_classes=0")
    n = int(np.prod(dims))
    if len(payload) != 4 * n:
        raise PayloadSizeError(f"{path}: payload {len(payload)} bytes, expected {4 * n}")
    data = np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)
    return Volume(data)


def write_labels(path, labels: LabelMap) -> None:
    _write(path, DTYPE_U8, labels.num_classes, labels.dims, labels.data.tobytes())


def read_labels(path) -> LabelMap:
    payload, num_classes, dims = _read(path, DTYPE_U8)
    if num_classes < 2:
        raise DTypeMismatchError(f"{path}: label file must declare num_classes >= 2")
    n = int(np.prod(dims))
    if len(payload) != n:
        raise PayloadSizeError(f"{path}: payload {len(payload)} bytes, expected {n}")
    data = np.frombuffer(payload, dtype=np.uint8).reshape(dims).copy()
    return LabelMap(data, num_classes)


# Vector-valued volumes (displacement fields) reuse the f32 layout with the
# num_classes slot holding the channel count; payload is (C, D, H, W).
def write_field(path, field: np.ndarray) -> None:
    field = np.asarray(field, dtype=np.float32)
    if field.ndim != 4:
        raise ValueError(f"field must be (C, D, H, W), got {field.shape}")
    _write(path, DTYPE_F32, field.shape[0], field.shape[1:], field.astype("<f4").tobytes())


def read_field(path) -> np.ndarray:
    payload, channels, dims = _read(path, DTYPE_F32)
    if channels < 1:
        raise DTypeMismatchError(f"{path}: not a vector field (channel count 0)")
    n = channels * int(np.prod(dims))
    if len(payload) != 4 * n:
        raise PayloadSizeError(f"{path}: payload {len(payload)} bytes, expected {4 * n}")
    return np.frombuffer(payload, dtype="<f4").reshape((channels, *dims)).astype(np.float32)
