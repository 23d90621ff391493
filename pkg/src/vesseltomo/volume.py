"""Dense 3D scalar volumes, their on-disk format, masking, and resampling.

A volume is stored as a C-contiguous float32 array of shape (nz, ny, nx),
which makes x the fastest-varying axis of the flat buffer. The flat index of
voxel (ix, iy, iz) is therefore ix + nx*iy + nx*ny*iz, and that is also the
layout of the raw payload on disk. Physical coordinates place the volume
center at the origin: voxel (ix, iy, iz) covers the half-open box
[lo_a + i*s_a, lo_a + (i+1)*s_a) per axis with lo = -dims*spacing/2.
"""

import json
import os
from dataclasses import dataclass
from enum import Enum

import numpy as np


class VolumeKind(str, Enum):
    """Payload interpretation: attenuation-like scalars or a 0/1 mask."""

    INTENSITY = "intensity"
    MASK = "mask"


class VolumeFormatError(Exception):
    """Raised when a volume file or its sidecar header is malformed."""


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar field with voxel spacing in millimeters.

    Attributes:
        data: float32 array, shape (nz, ny, nx). Made read-only on construction.
        spacing: voxel size (sx, sy, sz) in mm, all positive.
        kind: INTENSITY for scalar fields, MASK for strictly 0/1 volumes.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    kind: VolumeKind = VolumeKind.INTENSITY

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"volume data must be 3D with positive dims, got shape {arr.shape}")
        sp = tuple(float(s) for s in self.spacing)
        if len(sp) != 3 or any(s <= 0 for s in sp):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        kind = VolumeKind(self.kind)
        if kind is VolumeKind.MASK and not _is_binary(arr):
            raise ValueError("mask volumes may contain only 0 and 1")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "spacing", sp)
        object.__setattr__(self, "kind", kind)

    @property
    def dims(self) -> tuple[int, int, int]:
        """Grid size as (nx, ny, nz)."""
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def n_voxels(self) -> int:
        return int(self.data.size)

    @property
    def origin(self) -> tuple[float, float, float]:
        """Physical coordinate of the lower corner of voxel (0, 0, 0)."""
        return tuple(-n * s / 2.0 for n, s in zip(self.dims, self.spacing))

    def astype_bool(self) -> np.ndarray:
        """Mask payload as a boolean array (shape (nz, ny, nx))."""
        return self.data > 0.5


def _is_binary(arr: np.ndarray) -> bool:
    # NaN fails both comparisons, so it is rejected here as well.
    return bool(np.all((arr == 0.0) | (arr == 1.0)))


def _header_path(path: str) -> str:
    return str(path) + ".json"


def save_volume(volume: Volume, path: str) -> None:
    """Write raw little-endian float32 payload plus a JSON sidecar.

    The sidecar lives at ``path + ".json"`` and records dims (nx, ny, nz),
    spacing, kind, dtype and byte order.
    """
    payload = np.ascontiguousarray(volume.data, dtype="<f4")
    payload.tofile(path)
    header = {
        "dims": list(volume.dims),
        "spacing": list(volume.spacing),
        "kind": volume.kind.value,
        "dtype": "f32",
        "order": "little",
    }
    with open(_header_path(path), "w") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")


def load_volume(path: str) -> Volume:
    """Read a volume written by :func:`save_volume`.

    Raises VolumeFormatError for a missing or malformed sidecar, a payload
    size that disagrees with the declared dims, an unknown dtype or byte
    order, or NaN values in a mask payload.
    """
    hpath = _header_path(path)
    if not os.path.exists(hpath):
        raise VolumeFormatError(f"missing volume header {hpath}")
    try:
        with open(hpath) as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise VolumeFormatError(f"unreadable volume header {hpath}: {exc}") from exc

    try:
        dims = tuple(int(d) for d in header["dims"])
        kind = VolumeKind(header["kind"])
        dtype = header["dtype"]
        order = header.get("order", "little")
    except (KeyError, ValueError, TypeError) as exc:
        raise VolumeFormatError(f"bad volume header {hpath}: {exc}") from exc
    if len(dims) != 3:
        raise VolumeFormatError(f"header dims must have 3 entries, got {header['dims']}")
    if dtype != "f32":
        raise VolumeFormatError(f"unsupported dtype {dtype!r}, expected 'f32'")
    if order != "little":
        raise VolumeFormatError(f"unsupported byte order {order!r}, expected 'little'")
    spacing = tuple(float(s) for s in header.get("spacing", (1.0, 1.0, 1.0)))

    raw = np.fromfile(path, dtype="<f4")
    nx, ny, nz = dims
    if raw.size != nx * ny * nz:
        raise VolumeFormatError(
            f"payload of {path} has {raw.size} values, header declares {nx * ny * nz}"
        )
    data = raw.astype(np.float32).reshape(nz, ny, nx)
    if kind is VolumeKind.MASK and np.isnan(data).any():
        raise VolumeFormatError(f"mask payload of {path} contains NaN")
    try:
        return Volume(data, spacing, kind)
    except ValueError as exc:
        raise VolumeFormatError(f"invalid volume payload in {path}: {exc}") from exc


def apply_mask(volume: Volume, mask: Volume) -> Volume:
    """Zero out voxels where the mask is 0. Dims and spacing must match."""
    if mask.kind is not VolumeKind.MASK:
        raise ValueError("apply_mask needs a MASK volume as second argument")
    if volume.dims != mask.dims:
        raise ValueError(f"dims mismatch: {volume.dims} vs {mask.dims}")
    if volume.spacing != mask.spacing:
        raise ValueError(f"spacing mismatch: {volume.spacing} vs {mask.spacing}")
    return Volume(volume.data * mask.data, volume.spacing, volume.kind)


def _axis_coords(n_src: int, n_tgt: int) -> np.ndarray:
    # Pixel-center alignment: target center i maps to source coordinate
    # (i + 0.5) * n_src/n_tgt - 0.5, clamped to the source sample range.
    c = (np.arange(n_tgt, dtype=np.float64) + 0.5) * (n_src / n_tgt) - 0.5
    return np.clip(c, 0.0, n_src - 1.0)


def resample(volume: Volume, target_dims: tuple[int, int, int]) -> Volume:
    """Resample to a new grid over the same physical extent.

    Trilinear interpolation for INTENSITY volumes, nearest neighbor for MASK
    volumes so the result stays strictly 0/1. Output spacing is scaled so the
    physical extent is preserved.
    """
    nx_t, ny_t, nz_t = (int(d) for d in target_dims)
    if min(nx_t, ny_t, nz_t) < 1:
        raise ValueError(f"target dims must be positive, got {target_dims}")
    nx, ny, nz = volume.dims
    cz = _axis_coords(nz, nz_t)
    cy = _axis_coords(ny, ny_t)
    cx = _axis_coords(nx, nx_t)
    src = volume.data.astype(np.float64)

    if volume.kind is VolumeKind.MASK:
        iz = np.clip(np.floor(cz + 0.5).astype(np.int64), 0, nz - 1)
        iy = np.clip(np.floor(cy + 0.5).astype(np.int64), 0, ny - 1)
        ix = np.clip(np.floor(cx + 0.5).astype(np.int64), 0, nx - 1)
        out = src[np.ix_(iz, iy, ix)]
    else:
        z0 = np.floor(cz).astype(np.int64)
        y0 = np.floor(cy).astype(np.int64)
        x0 = np.floor(cx).astype(np.int64)
        z1 = np.minimum(z0 + 1, nz - 1)
        y1 = np.minimum(y0 + 1, ny - 1)
        x1 = np.minimum(x0 + 1, nx - 1)
        fz = (cz - z0)[:, None, None]
        fy = (cy - y0)[None, :, None]
        fx = (cx - x0)[None, None, :]
        out = np.zeros((nz_t, ny_t, nx_t), dtype=np.float64)
        for zi, wz in ((z0, 1.0 - fz), (z1, fz)):
            for yi, wy in ((y0, 1.0 - fy), (y1, fy)):
                for xi, wx in ((x0, 1.0 - fx), (x1, fx)):
                    out += wz * wy * wx * src[np.ix_(zi, yi, xi)]

    extent = tuple(n * s for n, s in zip(volume.dims, volume.spacing))
    new_spacing = (extent[0] / nx_t, extent[1] / ny_t, extent[2] / nz_t)
    return Volume(out.astype(np.float32), new_spacing, volume.kind)
