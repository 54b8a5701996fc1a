"""Dense 3D volumes on a unit voxel grid, with bit-exact binary IO.

A volume is a box of ``nx * ny * nz`` float64 samples. Voxel ``(i, j, k)``
sits at the real-space point ``(i, j, k)``: the grid spacing is fixed to one
voxel per axis and atom positions live in the same frame.

File format (extension ``.vol`` by convention)::

    bytes 0..7    magic  b"SFW3DV01"
    bytes 8..19   nx, ny, nz as little-endian uint32
    bytes 20..    nx*ny*nz little-endian IEEE-754 float64, C order
                  (k fastest, then j, then i)

The payload is written straight from the in-memory array, so a write/read
round trip is bit-exact.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"SFW3DV01"
_HEADER = struct.Struct("<8s3I")


class VolumeFormatError(ValueError):
    """Raised for malformed volume files (bad magic, size mismatch, NaN)."""


def _check_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(n) for n in dims)
    if len(dims) != 3 or any(n < 1 for n in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


@dataclass(frozen=True, eq=False)
class Volume:
    """Immutable dense scalar field over a 3D voxel grid."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {arr.shape}")
        _check_dims(arr.shape)
        if not np.isfinite(arr).all():
            raise ValueError("volume data contains non-finite values")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class GridGeometry:
    """Voxel grid geometry: dims only, spacing fixed at 1 voxel per axis."""

    dims: tuple[int, int, int]

    def __post_init__(self):
        object.__setattr__(self, "dims", _check_dims(self.dims))

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz


def zero_volume(dims) -> Volume:
    """All-zero volume of the requested size."""
    return Volume(np.zeros(_check_dims(dims)))


def volume_norms(v: Volume) -> tuple[float, float]:
    """Return ``(max |v_i|, sqrt(sum v_i^2))``."""
    flat = v.data.ravel()
    linf = float(np.max(np.abs(flat))) if flat.size else 0.0
    return linf, float(np.linalg.norm(flat))


def write_volume(v: Volume, path) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, *v.dims))
        fh.write(np.ascontiguousarray(v.data, dtype="<f8").tobytes())


def read_volume(path) -> Volume:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"{path}: truncated header")
    magic, nx, ny, nz = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VolumeFormatError(f"{path}: bad magic {magic!r}")
    dims = _check_dims((nx, ny, nz))
    expected = _HEADER.size + 8 * nx * ny * nz
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{path}: payload size mismatch (header says {expected} bytes, file has {len(raw)})"
        )
    data = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(dims)
    if not np.isfinite(data).all():
        raise VolumeFormatError(f"{path}: payload contains non-finite values")
    return Volume(data.copy())
