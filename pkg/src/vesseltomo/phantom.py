"""Procedural vessel-tree phantoms with known centerline ground truth.

The generator grows a binary branching tube tree by recursion: each segment
spawns two children whose polar deviation from the parent direction is drawn
from the configured angle range, with radii and lengths shrinking by fixed
decay factors. Randomness comes from the counter-based Philox generator, so
a given (config, seed) pair reproduces the identical phantom on any platform
and numpy build. Draw order is fixed by the depth-first growth.

Coordinates are continuous voxel units: voxel (ix, iy, iz) covers the unit
cube [ix, ix+1) x [iy, iy+1) x [iz, iz+1) and is set when its center lies
within the tube radius of a centerline segment (capsule test, so branch ends
are rounded). The centerline graph is exported alongside the mask and acts
as ground truth for skeleton-based scores.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume, VolumeKind

# Philox stream tags so mask growth and CT noise never share a substream.
_STREAM_TREE = 1
_STREAM_NOISE = 2


@dataclass(frozen=True)
class PhantomConfig:
    """Knobs for tree growth and the CT-like rendering around it.

    Defaults at 64^3 put roughly 5 percent of the voxels inside the tree,
    which matches the default 95th-percentile segmentation threshold.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    seed: int = 0
    depth: int = 3
    root_radius: float = 8.5
    radius_decay: float = 0.75
    root_length: float = 20.0
    length_decay: float = 0.75
    branch_angle_deg: tuple[float, float] = (18.0, 32.0)
    background: float = 0.1
    vessel: float = 1.0
    noise_sigma: float = 0.02

    def __post_init__(self) -> None:
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.root_radius <= 0 or self.root_length <= 0:
            raise ValueError("root radius and length must be positive")
        if not (0 < self.radius_decay <= 1 and 0 < self.length_decay <= 1):
            raise ValueError("decay factors must be in (0, 1]")
        lo, hi = self.branch_angle_deg
        if not (0 <= lo <= hi < 90):
            raise ValueError(f"branch angle range must satisfy 0 <= lo <= hi < 90, got {lo, hi}")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be >= 0")


@dataclass
class CenterlineGraph:
    """Tree centerline: node positions in voxel coordinates, edges, radii.

    radii[i] is the tube radius of edges[i]. clipped flags a tree that did
    not fully fit inside the volume and was cut at the grid boundary.
    """

    nodes: list = field(default_factory=list)
    edges: list = field(default_factory=list)
    radii: list = field(default_factory=list)
    clipped: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "nodes": self.nodes, "edges": self.edges,
            "radii": self.radii, "clipped": self.clipped,
        })

    @classmethod
    def from_json(cls, text: str) -> "CenterlineGraph":
        d = json.loads(text)
        return cls(d["nodes"], d["edges"], d["radii"], d["clipped"])

    def save(self, path: str) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())
            fh.write("\n")

    @classmethod
    def load(cls, path: str) -> "CenterlineGraph":
        with open(path) as fh:
            return cls.from_json(fh.read())

    def sample_points(self, step: float = 0.5) -> np.ndarray:
        """Points along every edge at roughly `step` voxel spacing."""
        pts = []
        nodes = np.asarray(self.nodes, dtype=np.float64)
        for i, j in self.edges:
            p0, p1 = nodes[i], nodes[j]
            n = max(2, int(math.ceil(np.linalg.norm(p1 - p0) / step)) + 1)
            t = np.linspace(0.0, 1.0, n)[:, None]
            pts.append(p0 + t * (p1 - p0))
        return np.concatenate(pts) if pts else np.zeros((0, 3))


def _orthonormal_frame(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # Any two unit vectors spanning the plane normal to u.
    helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = np.cross(u, helper)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def _paint_capsule(mask: np.ndarray, p0: np.ndarray, p1: np.ndarray, radius: float) -> None:
    """Set voxels whose centers lie within `radius` of segment p0-p1."""
    nz, ny, nx = mask.shape
    dims = np.array([nx, ny, nz], dtype=np.float64)
    lo = np.clip(np.floor(np.minimum(p0, p1) - radius - 1), 0, dims - 1).astype(int)
    hi = np.clip(np.ceil(np.maximum(p0, p1) + radius + 1), 1, dims).astype(int)
    if np.any(lo >= hi):
        return
    xs = np.arange(lo[0], hi[0]) + 0.5
    ys = np.arange(lo[1], hi[1]) + 0.5
    zs = np.arange(lo[2], hi[2]) + 0.5
    gx = xs[None, None, :]
    gy = ys[None, :, None]
    gz = zs[:, None, None]
    seg = p1 - p0
    seg_len_sq = float(seg @ seg)
    rx = gx - p0[0]
    ry = gy - p0[1]
    rz = gz - p0[2]
    if seg_len_sq > 0:
        t = (rx * seg[0] + ry * seg[1] + rz * seg[2]) / seg_len_sq
        t = np.clip(t, 0.0, 1.0)
    else:
        t = np.zeros(1)
    dx = rx - t * seg[0]
    dy = ry - t * seg[1]
    dz = rz - t * seg[2]
    inside = dx * dx + dy * dy + dz * dz <= radius * radius
    mask[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]] |= inside


def generate_vessel_tree(config: PhantomConfig = PhantomConfig()) -> tuple[Volume, CenterlineGraph]:
    """Grow the seeded tree and rasterize it into a binary mask volume."""
    nx, ny, nz = (int(d) for d in config.dims)
    rng = np.random.Generator(np.random.Philox(key=[config.seed, _STREAM_TREE]))
    mask = np.zeros((nz, ny, nx), dtype=bool)
    graph = CenterlineGraph()

    root_start = np.array([nx / 2.0, ny / 2.0, config.root_radius + 2.0])
    graph.nodes.append(list(root_start))
    lo_ang, hi_ang = config.branch_angle_deg

    # Depth-first growth with a fixed draw order per segment keeps the
    # phantom a pure function of (config, seed).
    stack = [(0, np.array([0.0, 0.0, 1.0]), config.root_radius, config.root_length, 1)]
    dims_f = np.array([nx, ny, nz], dtype=np.float64)
    clipped = False
    while stack:
        node_i, direction, radius, length, level = stack.pop()
        p0 = np.asarray(graph.nodes[node_i], dtype=np.float64)
        p1 = p0 + direction * length
        if np.any(p1 - radius < 0) or np.any(p1 + radius > dims_f) \
                or np.any(p0 - radius < 0) or np.any(p0 + radius > dims_f):
            clipped = True
        _paint_capsule(mask, p0, p1, radius)
        node_j = len(graph.nodes)
        graph.nodes.append([float(c) for c in p1])
        graph.edges.append([node_i, node_j])
        graph.radii.append(float(radius))
        if level < config.depth:
            e1, e2 = _orthonormal_frame(direction)
            polar = np.radians(rng.uniform(lo_ang, hi_ang, size=2))
            phi0 = rng.uniform(0.0, 2.0 * math.pi)
            children = []
            for j in range(2):
                phi = phi0 + j * math.pi
                d = (math.cos(polar[j]) * direction
                     + math.sin(polar[j]) * (math.cos(phi) * e1 + math.sin(phi) * e2))
                d /= np.linalg.norm(d)
                children.append((
                    node_j, d, radius * config.radius_decay,
                    length * config.length_decay, level + 1,
                ))
            # Reversed so child 0 is processed first off the stack.
            stack.extend(reversed(children))
    graph.clipped = clipped
    volume = Volume(mask.astype(np.float32), (1.0, 1.0, 1.0), VolumeKind.MASK)
    return volume, graph


def generate_ct_like(tree: Volume, config: PhantomConfig) -> Volume:
    """Render the tree into an intensity volume: background, vessels, noise.

    Output is background + vessel * mask + Gaussian noise, clamped to be
    non-negative. Noise uses a Philox substream separate from tree growth.
    """
    if tree.kind is not VolumeKind.MASK:
        raise ValueError("generate_ct_like expects the tree mask volume")
    rng = np.random.Generator(np.random.Philox(key=[config.seed, _STREAM_NOISE]))
    data = config.background + config.vessel * tree.data.astype(np.float64)
    if config.noise_sigma > 0:
        data = data + rng.normal(0.0, config.noise_sigma, size=data.shape)
    data = np.maximum(data, 0.0)
    return Volume(data.astype(np.float32), tree.spacing, VolumeKind.INTENSITY)
