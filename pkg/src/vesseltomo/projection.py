"""Projection images: integral projections, top-k maxima, export, file I/O.

An integral projection sums chord-length-weighted voxel values along each
ray, which equals the Beer-Lambert attenuation exponent -ln(R/R0) of the
simulated transmission. The top-k variant keeps, per ray, the k largest
weighted samples in descending order; channel 0 alone is a classical maximum
intensity projection.

Stack files are raw little-endian float32 payloads with a JSON sidecar at
``path + ".json"`` holding n_views, detector size, the k channel count for
top-k stacks, and the full acquisition geometry. Projection payloads are laid
out (n_views, nv, nu) with u fastest; top-k payloads are (n_views, k, nv, nu).
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .geometry import ProjectionGeometry, _view_paths, _run_chunks, forward_apply
from .volume import Volume

_Z_BLOCK = 32  # z rows processed per top-k batch, bounds scratch memory


class StackFormatError(Exception):
    """Raised when a stack file or its sidecar header is malformed."""


@dataclass(frozen=True)
class ProjectionStack:
    """Per-view scalar images of shape (n_views, nv, nu)."""

    data: np.ndarray
    geometry: ProjectionGeometry

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        nu, nv = self.geometry.detector
        expect = (self.geometry.n_views, nv, nu)
        if arr.shape != expect:
            raise ValueError(f"stack shape {arr.shape} does not match geometry {expect}")
        object.__setattr__(self, "data", arr)

    @property
    def n_views(self) -> int:
        return self.geometry.n_views

    @property
    def nu(self) -> int:
        return self.geometry.nu

    @property
    def nv(self) -> int:
        return self.geometry.nv


@dataclass(frozen=True)
class TopKStack:
    """Per-view k-channel ray maxima, shape (n_views, k, nv, nu).

    Channels are sorted, channel 0 the largest weighted sample of the ray;
    channels past the number of traversed voxels are zero.
    """

    data: np.ndarray
    geometry: ProjectionGeometry

    def __post_init__(self) -> None:
        arr = np.asarray(self.data, dtype=np.float64)
        nu, nv = self.geometry.detector
        if arr.ndim != 4 or arr.shape[0] != self.geometry.n_views \
                or arr.shape[2] != nv or arr.shape[3] != nu or arr.shape[1] < 1:
            raise ValueError(
                f"top-k stack shape {arr.shape} does not match geometry "
                f"({self.geometry.n_views}, k, {nv}, {nu})"
            )
        if arr.shape[1] > 1 and np.any(arr[:, :-1] < arr[:, 1:]):
            raise ValueError("top-k channels must be non-increasing")
        object.__setattr__(self, "data", arr)

    @property
    def k(self) -> int:
        return int(self.data.shape[1])

    @property
    def n_views(self) -> int:
        return self.geometry.n_views


def integral_projection(
    volume: Volume, geom: ProjectionGeometry, workers: int = 1
) -> ProjectionStack:
    """Chord-length-weighted line integrals for every ray of the geometry."""
    return forward_apply(geom, volume, workers=workers)


def beer_lambert_form(stack: ProjectionStack, r0: float = 1.0) -> ProjectionStack:
    """Round-trip through transmitted intensities R = R0 * exp(-ip).

    Returns -ln(R/R0), which recovers the input line integrals; useful to
    express projections in attenuation form and as a consistency check.
    """
    if r0 <= 0:
        raise ValueError(f"reference intensity R0 must be positive, got {r0}")
    transmitted = r0 * np.exp(-stack.data)
    return ProjectionStack(-np.log(transmitted / r0), stack.geometry)


def topk_mip(
    volume: Volume, geom: ProjectionGeometry, k: int = 32, workers: int = 1
) -> TopKStack:
    """Top-k maximum intensity projection.

    Each ray's samples are the chord-length-weighted voxel values produced by
    the same traversal as integral_projection; the k largest are returned in
    descending order. Ties between equal samples do not affect the output
    values, so the result is deterministic. Requires a non-negative volume.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if float(volume.data.min()) < 0.0:
        raise ValueError("top-k projection requires a non-negative volume")
    nx, ny, nz = volume.dims
    nu, nv = geom.detector
    paths = _view_paths(geom, (nx, ny, nz), tuple(volume.spacing))
    izmap = paths.izmap
    valid = izmap >= 0
    vol2 = volume.data.reshape(nz, ny * nx).astype(np.float64)
    out = np.zeros((geom.n_views, k, nv, nu), dtype=np.float64)

    def task(_ci, a, b):
        for view in range(a, b):
            u_idx, flat_xy, lens = paths.views[view]
            if u_idx.size == 0:
                continue
            counts = np.bincount(u_idx, minlength=nu)
            maxlen = int(counts.max())
            starts = np.zeros(nu + 1, dtype=np.int64)
            np.cumsum(counts, out=starts[1:])
            pos = np.arange(u_idx.size, dtype=np.int64) - starts[u_idx]
            slot = u_idx * maxlen + pos
            kk = min(k, maxlen)
            top = np.zeros((nz, nu, kk), dtype=np.float64)
            for z0 in range(0, nz, _Z_BLOCK):
                z1 = min(z0 + _Z_BLOCK, nz)
                padded = np.zeros((z1 - z0, nu * maxlen), dtype=np.float64)
                padded[:, slot] = vol2[z0:z1, flat_xy] * lens
                padded = padded.reshape(z1 - z0, nu, maxlen)
                if maxlen > kk:
                    padded = np.partition(padded, maxlen - kk, axis=2)[:, :, maxlen - kk:]
                top[z0:z1] = np.sort(padded, axis=2)[:, :, ::-1]
            # (n_valid, nu, kk) -> (kk, n_valid, nu) to match the indexed lhs
            out_view = out[view]
            out_view[:kk, valid, :] = top[izmap[valid]].transpose(2, 0, 1)

    _run_chunks(geom.n_views, workers, task)
    return TopKStack(out, geom)


def _normalize_u8(img: np.ndarray) -> np.ndarray:
    lo = float(img.min())
    hi = float(img.max())
    if hi == lo:
        return np.zeros(img.shape, dtype=np.uint8)
    scaled = (img - lo) * (255.0 / (hi - lo))
    return np.clip(np.floor(scaled + 0.5), 0, 255).astype(np.uint8)


def export_image(stack, view: int, path: str, channel: int = 0) -> None:
    """Write one view as an 8-bit grayscale image (PGM, or PNG by suffix).

    Values are min-max normalized per image; a constant image maps to zeros.
    For top-k stacks, ``channel`` picks the exported channel.
    """
    if not (0 <= view < stack.geometry.n_views):
        raise ValueError(f"view {view} outside stack with {stack.geometry.n_views} views")
    if isinstance(stack, TopKStack):
        if not (0 <= channel < stack.k):
            raise ValueError(f"channel {channel} outside top-k stack with k={stack.k}")
        img = stack.data[view, channel]
    else:
        img = stack.data[view]
    img8 = _normalize_u8(img)
    if str(path).lower().endswith(".png"):
        from PIL import Image

        Image.fromarray(img8, mode="L").save(path)
        return
    h, w = img8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img8.tobytes())


def _header_path(path: str) -> str:
    return str(path) + ".json"


def save_stack(stack, path: str) -> None:
    """Write a ProjectionStack or TopKStack as raw f32 plus JSON sidecar."""
    np.ascontiguousarray(stack.data, dtype="<f4").tofile(path)
    header = {
        "n_views": stack.geometry.n_views,
        "nu": stack.geometry.nu,
        "nv": stack.geometry.nv,
        "geometry": stack.geometry.to_config(),
    }
    if isinstance(stack, TopKStack):
        header["k"] = stack.k
    with open(_header_path(path), "w") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")


def load_stack(path: str):
    """Read a stack written by save_stack; the sidecar decides the type."""
    hpath = _header_path(path)
    if not os.path.exists(hpath):
        raise StackFormatError(f"missing stack header {hpath}")
    try:
        with open(hpath) as fh:
            header = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise StackFormatError(f"unreadable stack header {hpath}: {exc}") from exc
    try:
        geom = ProjectionGeometry.from_config(header["geometry"])
        n_views, nu, nv = int(header["n_views"]), int(header["nu"]), int(header["nv"])
        k = int(header["k"]) if "k" in header else None
    except (KeyError, ValueError, TypeError) as exc:
        raise StackFormatError(f"bad stack header {hpath}: {exc}") from exc
    if (n_views, nu, nv) != (geom.n_views, geom.nu, geom.nv):
        raise StackFormatError(f"header counts disagree with geometry in {hpath}")
    raw = np.fromfile(path, dtype="<f4")
    shape = (n_views, nv, nu) if k is None else (n_views, k, nv, nu)
    if raw.size != int(np.prod(shape)):
        raise StackFormatError(
            f"payload of {path} has {raw.size} values, header declares {np.prod(shape)}"
        )
    data = raw.astype(np.float64).reshape(shape)
    try:
        if k is None:
            return ProjectionStack(data, geom)
        return TopKStack(data, geom)
    except ValueError as exc:
        raise StackFormatError(f"invalid stack payload in {path}: {exc}") from exc
