"""Parallel-beam acquisition geometry and exact ray-voxel intersection.

The scanner rotates about the volume z axis. For view angle theta the rays
travel along d = (cos t, sin t, 0); the detector u axis is (-sin t, cos t, 0)
and the v axis is +z, so every ray lies in a plane of constant z. Angles stay
inside [0, 180) because opposing parallel-beam views are redundant.

Voxel traversal follows Siddon's method: collect the parametric crossings of
the ray with every grid plane, merge them, and read off one (voxel, chord
length) pair per segment. Voxel membership uses half-open intervals per axis,
so a ray running exactly along a plane is charged to the voxel with the
larger index. Chord lengths are exact (direction vectors are unit norm).
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .volume import Volume, VolumeKind

# Segments shorter than this (mm) are corner-grazing artifacts of the plane
# merge and carry no area; dropping them keeps every stored length positive.
_MIN_SEGMENT = 1e-10


class MemoryBudgetError(Exception):
    """Explicit system matrix would exceed the configured byte budget."""


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam view set plus detector grid.

    detector is (nu, nv) pixels and detector_spacing is (du, dv) in mm. The
    detector is centered on the rotation axis, v parallel to z.
    """

    n_views: int = 180
    angle_start_deg: float = 0.0
    angle_step_deg: float = 1.0
    detector: tuple[int, int] = (256, 256)
    detector_spacing: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self) -> None:
        object.__setattr__(self, "detector", tuple(int(d) for d in self.detector))
        object.__setattr__(
            self, "detector_spacing", tuple(float(s) for s in self.detector_spacing)
        )
        if self.n_views < 1:
            raise ValueError(f"n_views must be >= 1, got {self.n_views}")
        if len(self.detector) != 2 or min(self.detector) < 1:
            raise ValueError(f"detector must be two positive pixel counts, got {self.detector}")
        if len(self.detector_spacing) != 2 or min(self.detector_spacing) <= 0:
            raise ValueError(f"detector spacing must be positive, got {self.detector_spacing}")
        a = self.angles_deg
        if np.any(a < 0.0) or np.any(a >= 180.0):
            raise ValueError(
                f"view angles must lie in [0, 180) deg, got range [{a.min()}, {a.max()}]"
            )

    @property
    def angles_deg(self) -> np.ndarray:
        return self.angle_start_deg + self.angle_step_deg * np.arange(self.n_views)

    @property
    def nu(self) -> int:
        return self.detector[0]

    @property
    def nv(self) -> int:
        return self.detector[1]

    @property
    def n_rays(self) -> int:
        return self.n_views * self.nu * self.nv

    def to_config(self) -> dict:
        return {
            "n_views": self.n_views,
            "angle_start_deg": self.angle_start_deg,
            "angle_step_deg": self.angle_step_deg,
            "detector": list(self.detector),
            "detector_spacing": list(self.detector_spacing),
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "ProjectionGeometry":
        known = {f: cfg[f] for f in (
            "n_views", "angle_start_deg", "angle_step_deg", "detector", "detector_spacing"
        ) if f in cfg}
        return cls(**known)


def make_geometry(
    dims: tuple[int, int, int] | None = None,
    n_views: int = 180,
    angle_start_deg: float = 0.0,
    angle_step_deg: float = 1.0,
    detector: tuple[int, int] | None = None,
    detector_spacing: tuple[float, float] = (1.0, 1.0),
) -> ProjectionGeometry:
    """Build a validated geometry; detector defaults to max(dims) square."""
    if detector is None:
        if dims is None:
            raise ValueError("either dims or an explicit detector size is required")
        m = max(int(d) for d in dims)
        detector = (m, m)
    return ProjectionGeometry(
        n_views=n_views,
        angle_start_deg=angle_start_deg,
        angle_step_deg=angle_step_deg,
        detector=detector,
        detector_spacing=detector_spacing,
    )


@dataclass(frozen=True)
class Ray:
    """Single measurement ray: physical origin, unit direction, provenance."""

    origin: tuple[float, float, float]
    direction: tuple[float, float, float]
    view: int = 0
    pixel: tuple[int, int] = (0, 0)

    def __post_init__(self) -> None:
        d = self.direction
        norm = math.sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2])
        if abs(norm - 1.0) > 1e-9:
            raise ValueError(f"ray direction must be unit norm, |d| = {norm}")


def _view_basis(geom: ProjectionGeometry, view: int) -> tuple[float, float, float, float]:
    """(dx, dy, ux, uy): ray direction and detector u axis for a view."""
    t = math.radians(geom.angle_start_deg + geom.angle_step_deg * view)
    return math.cos(t), math.sin(t), -math.sin(t), math.cos(t)


def _ray_origin_xy(
    geom: ProjectionGeometry, view: int, u: int, reach: float
) -> tuple[float, float, float, float]:
    """In-plane origin and direction shared by every v row of pixel column u."""
    dx, dy, ux, uy = _view_basis(geom, view)
    u_off = (u - (geom.nu - 1) / 2.0) * geom.detector_spacing[0]
    ox = u_off * ux - reach * dx
    oy = u_off * uy - reach * dy
    return ox, oy, dx, dy


def _grid_reach(dims: tuple[int, int, int], spacing: tuple[float, float, float]) -> float:
    return math.sqrt(sum((n * s) ** 2 for n, s in zip(dims, spacing)))


def ray_for_pixel(
    geom: ProjectionGeometry,
    view: int,
    u: int,
    v: int,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> Ray:
    """Ray for detector pixel (u, v) of a view, origin placed outside the grid."""
    if not (0 <= view < geom.n_views and 0 <= u < geom.nu and 0 <= v < geom.nv):
        raise ValueError(f"pixel (view={view}, u={u}, v={v}) outside geometry")
    reach = _grid_reach(dims, spacing)
    ox, oy, dx, dy = _ray_origin_xy(geom, view, u, reach)
    oz = (v - (geom.nv - 1) / 2.0) * geom.detector_spacing[1]
    return Ray(origin=(ox, oy, oz), direction=(dx, dy, 0.0), view=view, pixel=(u, v))


def _trace_core(
    origin: tuple[float, float, float],
    direction: tuple[float, float, float],
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Siddon traversal. Returns (ix, iy, iz, lengths) in travel order."""
    n = [int(dims[0]), int(dims[1]), int(dims[2])]
    lo = [-n[a] * spacing[a] / 2.0 for a in range(3)]
    hi = [lo[a] + n[a] * spacing[a] for a in range(3)]
    empty = (
        np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.int64),
        np.empty(0, np.float64),
    )

    tmin, tmax = -math.inf, math.inf
    for a in range(3):
        d = direction[a]
        if d != 0.0:
            t1 = (lo[a] - origin[a]) / d
            t2 = (hi[a] - origin[a]) / d
            tmin = max(tmin, min(t1, t2))
            tmax = min(tmax, max(t1, t2))
        elif not (lo[a] <= origin[a] <= hi[a]):
            return empty
    if tmax - tmin <= _MIN_SEGMENT:
        return empty

    parts = [np.array([tmin, tmax])]
    for a in range(3):
        d = direction[a]
        if d != 0.0:
            planes = lo[a] + spacing[a] * np.arange(n[a] + 1, dtype=np.float64)
            t = (planes - origin[a]) / d
            parts.append(t[(t > tmin) & (t < tmax)])
    ts = np.sort(np.concatenate(parts))
    dt = np.diff(ts)
    keep = dt > _MIN_SEGMENT
    if not keep.any():
        return empty
    tmid = (ts[:-1] + ts[1:])[keep] * 0.5
    lengths = dt[keep]

    idx = []
    ok = np.ones(tmid.shape, dtype=bool)
    for a in range(3):
        m = origin[a] + direction[a] * tmid
        ia = np.floor((m - lo[a]) / spacing[a]).astype(np.int64)
        ok &= (ia >= 0) & (ia < n[a])
        idx.append(ia)
    return idx[0][ok], idx[1][ok], idx[2][ok], lengths[ok]


def trace_ray(
    ray: Ray,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
) -> tuple[np.ndarray, np.ndarray]:
    """Exact voxel intersections of one ray.

    Returns (indices, lengths) in traversal order, where indices are flat
    voxel ids ix + nx*iy + nx*ny*iz. Both arrays are empty when the ray
    misses the grid. Lengths are positive geometric chord lengths in mm; a
    ray passing exactly along a voxel boundary is charged to the voxel with
    the larger index.
    """
    ix, iy, iz, lengths = _trace_core(ray.origin, ray.direction, dims, spacing)
    nx, ny = int(dims[0]), int(dims[1])
    flat = ix + nx * (iy + ny * iz)
    return flat, lengths


@dataclass(frozen=True)
class SystemMatrix:
    """Sparse ray-by-voxel intersection matrix in CSR-like storage.

    One row per ray, ordered (view, v, u) with u fastest, matching the flat
    order of projection stacks. Column ids inside each row are sorted
    strictly increasing. Lengths are in mm.
    """

    indptr: np.ndarray
    indices: np.ndarray
    lengths: np.ndarray
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    geometry: ProjectionGeometry

    @property
    def n_rays(self) -> int:
        return len(self.indptr) - 1

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def to_csr(self) -> sp.csr_matrix:
        return sp.csr_matrix(
            (self.lengths, self.indices, self.indptr),
            shape=(self.n_rays, self.n_voxels),
        )


def build_system_matrix(
    geom: ProjectionGeometry,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    max_bytes: int = 1 << 30,
) -> SystemMatrix:
    """Trace every ray of the geometry into an explicit sparse matrix.

    Raises MemoryBudgetError once accumulated storage would exceed
    max_bytes; callers should fall back to the matrix-free operators, which
    produce identical values.
    """
    dims = tuple(int(d) for d in dims)
    spacing = tuple(float(s) for s in spacing)
    nu, nv = geom.detector
    indptr = np.zeros(geom.n_rays + 1, dtype=np.int64)
    chunks_idx: list[np.ndarray] = []
    chunks_len: list[np.ndarray] = []
    nnz = 0
    row = 0
    for view in range(geom.n_views):
        for v in range(nv):
            for u in range(nu):
                ray = ray_for_pixel(geom, view, u, v, dims, spacing)
                flat, lengths = trace_ray(ray, dims, spacing)
                if flat.size:
                    order = np.argsort(flat)
                    flat = flat[order]
                    if flat.size > 1 and np.any(np.diff(flat) <= 0):
                        raise RuntimeError("duplicate voxel in single-ray traversal")
                    chunks_idx.append(flat)
                    chunks_len.append(lengths[order])
                    nnz += flat.size
                    if nnz * 16 > max_bytes:
                        raise MemoryBudgetError(
                            f"system matrix needs more than {max_bytes} bytes; "
                            "use the matrix-free operators"
                        )
                row += 1
                indptr[row] = nnz
    indices = np.concatenate(chunks_idx) if chunks_idx else np.empty(0, np.int64)
    lengths = np.concatenate(chunks_len) if chunks_len else np.empty(0, np.float64)
    return SystemMatrix(indptr, indices, lengths, dims, spacing, geom)


# ---------------------------------------------------------------------------
# Matrix-free operators.
#
# Every ray lies in a constant-z plane, so the in-plane (x, y) path of pixel
# column u is shared by all nv detector rows of a view; only the z layer
# changes with v. The per-view paths are traced once and cached, then forward
# and adjoint sweeps reduce to gathers/scatters over the z axis.

_ENTRY_CHUNK_FLOATS = 4_000_000  # cap on gather buffer size, in float64 values


class _ViewPaths:
    """Cached in-plane traversals for one (geometry, dims, spacing) triple."""

    def __init__(self, geom, dims, spacing):
        self.geom = geom
        self.dims = dims
        self.spacing = spacing
        nx, ny, nz = dims
        nu, nv = geom.detector
        reach = _grid_reach(dims, spacing)
        z0 = -nz * spacing[2] / 2.0
        # z at the center of layer 0 keeps the probe ray strictly interior.
        zc = z0 + spacing[2] / 2.0

        dv = geom.detector_spacing[1]
        zv = (np.arange(nv) - (nv - 1) / 2.0) * dv
        iz = np.floor((zv - z0) / spacing[2]).astype(np.int64)
        iz[(zv < z0) | (iz < 0) | (iz >= nz)] = -1
        self.izmap = iz

        self.views: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        for view in range(geom.n_views):
            u_parts, f_parts, l_parts = [], [], []
            for u in range(nu):
                ox, oy, dx, dy = _ray_origin_xy(geom, view, u, reach)
                ix, iy, _, lengths = _trace_core((ox, oy, zc), (dx, dy, 0.0), dims, spacing)
                if ix.size:
                    u_parts.append(np.full(ix.size, u, dtype=np.int64))
                    f_parts.append(iy * nx + ix)
                    l_parts.append(lengths)
            if u_parts:
                self.views.append((
                    np.concatenate(u_parts),
                    np.concatenate(f_parts),
                    np.concatenate(l_parts),
                ))
            else:
                self.views.append((
                    np.empty(0, np.int64), np.empty(0, np.int64), np.empty(0, np.float64),
                ))


@lru_cache(maxsize=8)
def _view_paths(
    geom: ProjectionGeometry,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
) -> _ViewPaths:
    return _ViewPaths(geom, dims, spacing)


def _chunk_bounds(n: int, workers: int) -> list[tuple[int, int]]:
    parts = np.array_split(np.arange(n), max(1, min(workers, n)))
    return [(int(p[0]), int(p[-1]) + 1) for p in parts if p.size]


def _run_chunks(n_views: int, workers: int, task) -> None:
    bounds = _chunk_bounds(n_views, workers)
    if len(bounds) == 1:
        task(0, *bounds[0])
        return
    with ThreadPoolExecutor(max_workers=len(bounds)) as ex:
        futures = [ex.submit(task, ci, a, b) for ci, (a, b) in enumerate(bounds)]
        for f in futures:
            f.result()


def _forward_data(
    geom: ProjectionGeometry,
    data: np.ndarray,
    spacing: tuple[float, float, float],
    workers: int = 1,
) -> np.ndarray:
    """Line integrals of a (nz, ny, nx) array; returns (n_views, nv, nu)."""
    nz, ny, nx = data.shape
    nu, nv = geom.detector
    paths = _view_paths(geom, (nx, ny, nz), tuple(spacing))
    vol2 = data.reshape(nz, ny * nx).astype(np.float64, copy=False)
    izmap = paths.izmap
    valid = izmap >= 0
    out = np.zeros((geom.n_views, nv, nu), dtype=np.float64)
    chunk = max(1, _ENTRY_CHUNK_FLOATS // max(1, nz))

    def task(_ci, a, b):
        for view in range(a, b):
            u_idx, flat_xy, lens = paths.views[view]
            s = np.zeros((nz, nu), dtype=np.float64)
            for c0 in range(0, u_idx.size, chunk):
                sl = slice(c0, c0 + chunk)
                w = vol2[:, flat_xy[sl]] * lens[sl]
                for z in range(nz):
                    s[z] += np.bincount(u_idx[sl], weights=w[z], minlength=nu)
            out[view, valid, :] = s[izmap[valid]]

    _run_chunks(geom.n_views, workers, task)
    return out


def _adjoint_data(
    geom: ProjectionGeometry,
    stack_data: np.ndarray,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
    workers: int = 1,
) -> np.ndarray:
    """Transpose of _forward_data; returns a (nz, ny, nx) float64 array."""
    nx, ny, nz = dims
    nu, nv = geom.detector
    paths = _view_paths(geom, (nx, ny, nz), tuple(spacing))
    izmap = paths.izmap
    valid = izmap >= 0
    p = stack_data.astype(np.float64, copy=False)
    bounds = _chunk_bounds(geom.n_views, workers)
    accs: list[np.ndarray | None] = [None] * len(bounds)
    chunk = max(1, _ENTRY_CHUNK_FLOATS // max(1, nz))

    def task(ci, a, b):
        acc = np.zeros((nz, ny * nx), dtype=np.float64)
        for view in range(a, b):
            u_idx, flat_xy, lens = paths.views[view]
            pz = np.zeros((nz, nu), dtype=np.float64)
            np.add.at(pz, izmap[valid], p[view, valid, :])
            for c0 in range(0, u_idx.size, chunk):
                sl = slice(c0, c0 + chunk)
                w = pz[:, u_idx[sl]] * lens[sl]
                fx = flat_xy[sl]
                for z in range(nz):
                    acc[z] += np.bincount(fx, weights=w[z], minlength=ny * nx)
        accs[ci] = acc

    if len(bounds) == 1:
        task(0, *bounds[0])
    else:
        with ThreadPoolExecutor(max_workers=len(bounds)) as ex:
            futures = [ex.submit(task, ci, a, b) for ci, (a, b) in enumerate(bounds)]
            for f in futures:
                f.result()
    total = accs[0]
    for acc in accs[1:]:
        total = total + acc
    return total.reshape(nz, ny, nx)


def _op_forward(op, data: np.ndarray, spacing, workers: int = 1) -> np.ndarray:
    """Forward-project a (nz, ny, nx) array through a matrix or geometry."""
    if isinstance(op, SystemMatrix):
        nz, ny, nx = data.shape
        if (nx, ny, nz) != tuple(op.dims):
            raise ValueError(f"volume dims {(nx, ny, nz)} do not match matrix dims {op.dims}")
        nu, nv = op.geometry.detector
        flat = op.to_csr() @ data.astype(np.float64, copy=False).ravel()
        return flat.reshape(op.geometry.n_views, nv, nu)
    return _forward_data(op, data, spacing, workers)


def _op_adjoint(op, stack_data: np.ndarray, dims, spacing, workers: int = 1) -> np.ndarray:
    if isinstance(op, SystemMatrix):
        if dims is not None and tuple(dims) != tuple(op.dims):
            raise ValueError(f"requested dims {dims} do not match matrix dims {op.dims}")
        nx, ny, nz = op.dims
        flat = op.to_csr().T @ stack_data.astype(np.float64, copy=False).ravel()
        return flat.reshape(nz, ny, nx)
    if dims is None:
        raise ValueError("matrix-free adjoint needs explicit volume dims")
    return _adjoint_data(op, stack_data, tuple(int(d) for d in dims), spacing, workers)


def _op_geometry(op) -> ProjectionGeometry:
    return op.geometry if isinstance(op, SystemMatrix) else op


def forward_apply(op, volume: Volume, workers: int = 1):
    """Project a volume into a ProjectionStack.

    op is either a SystemMatrix or a ProjectionGeometry; the two routes agree
    to float precision because they share one traversal implementation.
    """
    from .projection import ProjectionStack  # deferred: projection builds on geometry

    geom = _op_geometry(op)
    if isinstance(op, SystemMatrix) and tuple(op.spacing) != tuple(volume.spacing):
        raise ValueError(f"volume spacing {volume.spacing} does not match matrix {op.spacing}")
    data = _op_forward(op, volume.data, volume.spacing, workers)
    return ProjectionStack(data, geom)


def adjoint_apply(
    op,
    stack,
    dims: tuple[int, int, int] | None = None,
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0),
    workers: int = 1,
) -> Volume:
    """Backproject a ProjectionStack into a Volume (transpose of forward_apply).

    With a SystemMatrix the output grid comes from the matrix; matrix-free
    callers pass dims (and spacing) of the target grid.
    """
    geom = _op_geometry(op)
    if stack.geometry != geom:
        raise ValueError("stack geometry does not match operator geometry")
    if isinstance(op, SystemMatrix):
        spacing = op.spacing
    data = _op_adjoint(op, stack.data, dims, spacing, workers)
    return Volume(data.astype(np.float32), spacing, VolumeKind.INTENSITY)
