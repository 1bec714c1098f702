"""Synthetic workspace: voxel occupancy, camera raycasting and occluded regions."""
from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from . import geometry
from .errors import EmptyRegion, EmptyVicinity, PoseOutOfBounds

WORKSPACE_SIZE = (0.8, 1.2, 0.4)
DEFAULT_RESOLUTION = 0.02
DEFAULT_VICINITY = (0.05, 0.05, 0.10)


class CellState(enum.IntEnum):
    UNKNOWN = 0
    FREE = 1
    OCCUPIED = 2


class ObjectKind(enum.Enum):
    BLOCK = "block"
    OBSTACLE = "obstacle"
    COVER = "cover"
    BIN = "bin"


class ColorClass(enum.Enum):
    TARGET = "target"
    DISTRACTOR = "distractor"


TARGET_RGB = (0.1, 0.8, 0.2)


@dataclass
class VoxelGrid:
    origin: np.ndarray
    resolution: float
    dims: tuple
    cells: np.ndarray  # uint8 CellState values, shape dims

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        self.dims = tuple(int(d) for d in self.dims)
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if any(d <= 0 for d in self.dims):
            raise ValueError("dims must be positive")
        if int(np.prod(self.dims)) > 2 ** 24:
            raise ValueError("grid larger than 2**24 voxels")
        if self.cells.shape != self.dims:
            raise ValueError(f"cells shape {self.cells.shape} != dims {self.dims}")

    @classmethod
    def empty(cls, origin=(0.0, 0.0, 0.0), resolution=DEFAULT_RESOLUTION,
              dims=None, size=WORKSPACE_SIZE):
        if dims is None:
            dims = tuple(int(round(s / resolution)) for s in size)
        if int(np.prod(dims, dtype=np.int64)) > 2 ** 24:
            raise ValueError("grid larger than 2**24 voxels")
        return cls(np.asarray(origin, float), float(resolution), dims,
                   np.zeros(dims, dtype=np.uint8))

    @property
    def observed(self) -> np.ndarray:
        return self.cells != CellState.UNKNOWN

    @property
    def lo(self):
        return self.origin

    @property
    def hi(self):
        return self.origin + self.resolution * np.array(self.dims)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.origin.copy(), self.resolution, self.dims, self.cells.copy())

    def centers(self) -> np.ndarray:
        """All voxel centers, flattened in C order, shape (N, 3)."""
        axes = [self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.resolution
                for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack([c.ravel() for c in g], axis=1)

    def center_of(self, flat_ids) -> np.ndarray:
        ijk = np.stack(np.unravel_index(np.asarray(flat_ids), self.dims), axis=-1)
        return self.origin + (ijk + 0.5) * self.resolution

    def observed_fraction(self) -> float:
        return float(self.observed.mean())


@dataclass
class CameraPose:
    position: np.ndarray
    orientation: np.ndarray  # unit quaternion (x, y, z, w)
    fov_h: float = 1.2
    fov_v: float = 0.9
    near: float = 0.05
    far: float = 1.2

    def __post_init__(self):
        self.position = np.asarray(self.position, float).reshape(3)
        self.orientation = np.asarray(self.orientation, float).reshape(4)
        if abs(np.linalg.norm(self.orientation) - 1.0) > 1e-9:
            raise ValueError("orientation quaternion must have unit norm")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if not (0 < self.fov_h < np.pi and 0 < self.fov_v < np.pi):
            raise ValueError("field of view must lie in (0, pi)")

    @classmethod
    def from_matrix(cls, position, R, **intrinsics):
        q = geometry.matrix_to_quat(R)
        return cls(position, q / np.linalg.norm(q), **intrinsics)

    @classmethod
    def from_rotvec(cls, position, rotvec, **intrinsics):
        return cls.from_matrix(position, geometry.rotvec_to_matrix(np.asarray(rotvec, float)),
                               **intrinsics)

    @classmethod
    def looking_at(cls, position, target, **intrinsics):
        return cls.from_matrix(position, geometry.look_at_matrix(position, target), **intrinsics)

    @property
    def rotation(self) -> np.ndarray:
        return geometry.quat_to_matrix(self.orientation)

    @property
    def rotvec(self) -> np.ndarray:
        return geometry.matrix_to_rotvec(self.rotation)

    def intrinsics(self) -> dict:
        return dict(fov_h=self.fov_h, fov_v=self.fov_v, near=self.near, far=self.far)


@dataclass
class SceneObject:
    id: int
    kind: ObjectKind
    lo: np.ndarray
    hi: np.ndarray
    tag: Optional[int] = None
    color_class: ColorClass = ColorClass.DISTRACTOR
    rgb: tuple = (0.6, 0.4, 0.3)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, float).reshape(3)
        self.hi = np.asarray(self.hi, float).reshape(3)
        if not np.all(self.lo < self.hi):
            raise ValueError(f"object {self.id}: aabb min must be < max")

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def size(self) -> np.ndarray:
        return self.hi - self.lo

    def translated(self, delta) -> "SceneObject":
        d = np.asarray(delta, float)
        return SceneObject(self.id, self.kind, self.lo + d, self.hi + d, self.tag,
                           self.color_class, self.rgb)

    def to_dict(self) -> dict:
        return {"id": self.id, "kind": self.kind.value, "lo": self.lo.tolist(),
                "hi": self.hi.tolist(), "tag": self.tag,
                "color_class": self.color_class.value, "rgb": list(self.rgb)}

    @classmethod
    def from_dict(cls, d) -> "SceneObject":
        return cls(int(d["id"]), ObjectKind(d["kind"]), d["lo"], d["hi"], d.get("tag"),
                   ColorClass(d.get("color_class", "distractor")),
                   tuple(d.get("rgb", (0.6, 0.4, 0.3))))


@dataclass
class Scene:
    objects: list = field(default_factory=list)
    discarded: list = field(default_factory=list)

    def __post_init__(self):
        tags = [o.tag for o in self.objects if o.tag is not None]
        if len(tags) != len(set(tags)):
            raise ValueError("at most one object per RFID tag")

    def by_tag(self, tag) -> Optional[SceneObject]:
        for o in self.objects:
            if o.tag == tag:
                return o
        return None

    def by_id(self, oid) -> Optional[SceneObject]:
        for o in self.objects:
            if o.id == oid:
                return o
        return None

    def boxes(self):
        if not self.objects:
            return np.zeros((0, 3)), np.zeros((0, 3))
        return (np.array([o.lo for o in self.objects]),
                np.array([o.hi for o in self.objects]))

    def copy(self) -> "Scene":
        return Scene(list(self.objects), list(self.discarded))


@dataclass
class OccludedRegion:
    voxel_ids: np.ndarray
    mean: np.ndarray
    cov_seed: np.ndarray

    @property
    def size(self) -> int:
        return int(len(self.voxel_ids))


def _camera_coords(points, position, R):
    """Camera-frame coordinates, component-wise so a scalar oracle can match."""
    dx = points[:, 0] - position[0]
    dy = points[:, 1] - position[1]
    dz = points[:, 2] - position[2]
    qx = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz
    qy = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz
    qz = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz
    return qx, qy, qz


def in_frustum(points, pose: CameraPose) -> np.ndarray:
    qx, qy, qz = _camera_coords(points, pose.position, pose.rotation)
    th = np.tan(pose.fov_h / 2.0)
    tv = np.tan(pose.fov_v / 2.0)
    return ((qz >= pose.near) & (qz <= pose.far)
            & (np.abs(qx) <= qz * th) & (np.abs(qy) <= qz * tv))


def check_pose_bounds(grid: VoxelGrid, pose: CameraPose, margin: float = 0.1):
    lo = grid.lo - margin
    hi = grid.hi + margin
    if np.any(pose.position < lo) or np.any(pose.position > hi):
        raise PoseOutOfBounds(f"camera at {pose.position} outside workspace {lo}..{hi}")


def integrate_observation(grid: VoxelGrid, pose: CameraPose, scene: Scene,
                          bounds_margin: float = 0.1) -> VoxelGrid:
    """Raycast one exact depth view into a copy of ``grid``.

    Each voxel center inside the frustum is tested along the segment from the
    camera.  Unblocked voxels become Free, voxels behind a hit keep their
    state, and the voxel containing each ray's first surface hit becomes
    Occupied (that voxel need not be the one whose center the ray aimed at).
    States only ever increase (Unknown < Free < Occupied).
    """
    check_pose_bounds(grid, pose, bounds_margin)
    out = grid.copy()
    centers = grid.centers()
    inside = np.flatnonzero(in_frustum(centers, pose))
    if inside.size == 0:
        return out
    v = centers[inside]
    c = pose.position
    lo, hi = scene.boxes()
    new_state = np.full(inside.size, CellState.FREE, dtype=np.uint8)
    if lo.shape[0]:
        t0, t1 = geometry.segment_box_entry(c, v, lo, hi)
        t0 = np.maximum(t0, 0.0)
        hit = (t0 <= t1) & (t0 <= 1.0)
        t_first = np.where(hit, t0, np.inf).min(axis=1)
        blocked = np.isfinite(t_first)
        half = grid.resolution / 2.0
        tf = np.where(blocked, t_first, 0.0)
        px = c[0] + tf * (v[:, 0] - c[0])
        py = c[1] + tf * (v[:, 1] - c[1])
        pz = c[2] + tf * (v[:, 2] - c[2])
        in_cell = ((np.abs(px - v[:, 0]) <= half) & (np.abs(py - v[:, 1]) <= half)
                   & (np.abs(pz - v[:, 2]) <= half))
        new_state = np.where(blocked & in_cell, CellState.OCCUPIED, new_state)
        new_state = np.where(blocked & ~in_cell, CellState.UNKNOWN, new_state).astype(np.uint8)
        # nudge the hit point just past the surface so it lands in the hit voxel
        d = v[blocked] - c
        h = np.stack([px, py, pz], axis=1)[blocked] + 1e-6 * d / np.linalg.norm(d, axis=1)[:, None]
        idx = np.floor((h - grid.origin) / grid.resolution).astype(int)
        ok = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
        hit_ids = np.ravel_multi_index(tuple(idx[ok].T), grid.dims)
    else:
        hit_ids = np.zeros(0, int)
    flat = out.cells.reshape(-1)
    flat[inside] = np.maximum(flat[inside], new_state)
    flat[hit_ids] = CellState.OCCUPIED
    return out


def fit_gaussian(voxel_centers):
    """Sample mean and population covariance of a point set."""
    pts = np.asarray(voxel_centers, float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise EmptyRegion("cannot fit a Gaussian to zero points")
    mean = pts.mean(axis=0)
    d = pts - mean
    cov = d.T @ d / pts.shape[0]
    return mean, 0.5 * (cov + cov.T)


_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def unknown_components(grid: VoxelGrid):
    """Labels of 6-connected Unknown components above the table layer."""
    mask = grid.cells == CellState.UNKNOWN
    mask[:, :, 0] = False
    labels, n = ndimage.label(mask, structure=_SIX_CONNECTED)
    return labels, n


def extract_occluded_regions(grid: VoxelGrid, max_regions: int = 4,
                             rf_position=None) -> list:
    """Largest Unknown components fitted as Gaussians.

    When ``rf_position`` is given, the region nearest to it in Mahalanobis
    distance is moved to index 0; the rest stay in size order.
    """
    if max_regions < 1:
        raise ValueError("max_regions must be >= 1")
    labels, n = unknown_components(grid)
    if n == 0:
        return []
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=n + 1)[1:]
    # stable sort keeps label order (raster order of first voxel) on ties
    order = np.argsort(-counts, kind="stable")[:max_regions]
    sorter = np.argsort(flat, kind="stable")
    starts = np.searchsorted(flat[sorter], np.arange(1, n + 2))
    regions = []
    for lab in order:
        ids = sorter[starts[lab]:starts[lab + 1]]
        mean, cov = fit_gaussian(grid.center_of(ids))
        regions.append(OccludedRegion(np.sort(ids), mean, cov))
    if rf_position is not None and len(regions) > 1:
        p = np.asarray(rf_position, float)
        jitter = grid.resolution ** 2 / 12.0 * np.eye(3)
        d2 = [float((p - r.mean) @ np.linalg.solve(r.cov_seed + jitter, p - r.mean))
              for r in regions]
        first = int(np.argmin(d2))
        regions.insert(0, regions.pop(first))
    return regions


def vicinity_ids(grid: VoxelGrid, p, vicinity=DEFAULT_VICINITY) -> np.ndarray:
    """Flat ids of voxels whose centers lie in the box of ``vicinity`` dims at ``p``."""
    p = np.asarray(p, float)
    half = np.asarray(vicinity, float) / 2.0
    if np.any(half <= 0):
        raise ValueError("vicinity dims must be positive")
    ranges = []
    for a in range(3):
        lo = int(np.ceil((p[a] - half[a] - grid.origin[a]) / grid.resolution - 0.5 - 1e-9))
        hi = int(np.floor((p[a] + half[a] - grid.origin[a]) / grid.resolution - 0.5 + 1e-9))
        lo, hi = max(lo, 0), min(hi, grid.dims[a] - 1)
        if hi < lo:
            return np.zeros(0, dtype=int)
        ranges.append(np.arange(lo, hi + 1))
    ii, jj, kk = np.meshgrid(*ranges, indexing="ij")
    return np.ravel_multi_index((ii.ravel(), jj.ravel(), kk.ravel()), grid.dims)


def visible_fraction(grid: VoxelGrid, p, vicinity=DEFAULT_VICINITY) -> float:
    """Fraction of observed voxels in the box around ``p``."""
    ids = vicinity_ids(grid, p, vicinity)
    if ids.size == 0:
        raise EmptyVicinity(f"no voxel centers within {vicinity} of {p}")
    return float(grid.observed.reshape(-1)[ids].mean())


_TWENTY_SIX_CONNECTED = ndimage.generate_binary_structure(3, 3)


def extract_frontier_boxes(grid: VoxelGrid, max_boxes: int = 8) -> list:
    """Axis-aligned bounds of the largest clusters of observed surface voxels."""
    mask = grid.cells == CellState.OCCUPIED
    labels, n = ndimage.label(mask, structure=_TWENTY_SIX_CONNECTED)
    if n == 0:
        return []
    counts = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    order = np.argsort(-counts, kind="stable")[:max_boxes]
    slices = ndimage.find_objects(labels)
    boxes = []
    for lab in order:
        sl = slices[lab]
        lo = grid.origin + np.array([s.start for s in sl]) * grid.resolution
        hi = grid.origin + np.array([s.stop for s in sl]) * grid.resolution
        boxes.append((lo, hi))
    return boxes


def frontier_patches(boxes) -> np.ndarray:
    """Face quads of frontier boxes, shape (6 * len(boxes), 4, 3)."""
    if not boxes:
        return np.zeros((0, 4, 3))
    return np.concatenate([geometry.box_faces(lo, hi) for lo, hi in boxes])


def signed_distance_to_fov(x, pose: CameraPose, frontiers=None) -> float:
    """Positive-inside signed distance to the unoccluded part of the frustum.

    ``frontiers`` is a (P, 4, 3) array (or list) of planar quads whose shadows
    are cut out of the view frustum.
    """
    patches = None if frontiers is None else np.asarray(frontiers, float).reshape(-1, 4, 3)
    return float(geometry.visible_sd(np.asarray(x, float), pose.position, pose.rotation,
                                     pose.fov_h, pose.fov_v, pose.near, pose.far, patches))


def pixel_rays(pose: CameraPose, width: int, height: int) -> np.ndarray:
    """World-frame ray directions (unit camera-z component) for each pixel."""
    th = np.tan(pose.fov_h / 2.0)
    tv = np.tan(pose.fov_v / 2.0)
    u = ((np.arange(width) + 0.5) / width * 2.0 - 1.0) * th
    v = ((np.arange(height) + 0.5) / height * 2.0 - 1.0) * tv
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack([uu.ravel(), vv.ravel(), np.ones(uu.size)], axis=1)
    return d_cam @ pose.rotation.T


def render_labels(pose: CameraPose, scene: Scene, width: int = 160, height: int = 120):
    """Object index seen by each pixel (-1 for background), shape (height, width).

    Rays are parameterised by camera depth, so ``near``/``far`` clip directly.
    Also returns the hit depth per pixel.
    """
    dirs = pixel_rays(pose, width, height)
    lo, hi = scene.boxes()
    t, idx = geometry.ray_box_hits(pose.position, dirs, lo, hi, pose.near, pose.far)
    return idx.reshape(height, width), t.reshape(height, width)


def count_target_pixels(pose: CameraPose, scene: Scene, width: int = 160,
                        height: int = 120) -> int:
    labels, _ = render_labels(pose, scene, width, height)
    target = np.array([o.color_class is ColorClass.TARGET for o in scene.objects] + [False])
    return int(target[labels].sum())


def target_pixel_centroid(pose: CameraPose, scene: Scene, width: int = 160,
                          height: int = 120):
    """Mean 3D surface point over target-colored pixels, or None if none."""
    labels, depth = render_labels(pose, scene, width, height)
    target = np.array([o.color_class is ColorClass.TARGET for o in scene.objects] + [False])
    sel = target[labels].ravel()
    if not sel.any():
        return None
    dirs = pixel_rays(pose, width, height)[sel]
    pts = pose.position + dirs * depth.ravel()[sel][:, None]
    return pts.mean(axis=0)


# --- grid snapshot export -------------------------------------------------

SNAPSHOT_MAGIC = b"VXG1"
_HEADER = struct.Struct("<4s3If3f")  # 32 bytes


def save_snapshot(grid: VoxelGrid, path) -> Path:
    """Write cell states as a flat binary with a 32-byte header plus a JSON sidecar."""
    path = Path(path)
    header = _HEADER.pack(SNAPSHOT_MAGIC, *grid.dims, grid.resolution, *grid.origin)
    path.write_bytes(header + grid.cells.astype(np.uint8).tobytes(order="C"))
    meta = {
        "format": "voxel-grid-snapshot",
        "version": 1,
        "dims": list(grid.dims),
        "resolution": grid.resolution,
        "origin": grid.origin.tolist(),
        "states": {s.name.lower(): int(s) for s in CellState},
        "order": "C (x slowest, z fastest)",
        "counts": {s.name.lower(): int((grid.cells == s).sum()) for s in CellState},
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))
    return path


def load_snapshot(path) -> VoxelGrid:
    raw = Path(path).read_bytes()
    magic, dx, dy, dz, res, ox, oy, oz = _HEADER.unpack_from(raw)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    cells = np.frombuffer(raw, dtype=np.uint8, offset=_HEADER.size).reshape(dx, dy, dz)
    origin, resolution = np.array([ox, oy, oz]), float(res)
    sidecar = Path(path).with_suffix(Path(path).suffix + ".json")
    if sidecar.exists():
        # the header stores float32; the sidecar keeps full precision
        meta = json.loads(sidecar.read_text())
        origin, resolution = np.array(meta["origin"], float), float(meta["resolution"])
    return VoxelGrid(origin, resolution, (dx, dy, dz), cells.copy())
