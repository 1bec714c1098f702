"""Orthographic top-down heightmaps, RF-centred crops and the RF attention kernel."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import RfOutOfWorkspace
from ..world import WORKSPACE_SIZE

CELL_SIZE = 0.005
CROP_SIZE = 0.11
TABLE_RGB = (0.0, 0.0, 0.0)


@dataclass
class Workspace:
    """Table-top rectangle that heightmaps cover (x, y in meters)."""
    lo: np.ndarray = None
    hi: np.ndarray = None

    def __post_init__(self):
        self.lo = np.zeros(2) if self.lo is None else np.asarray(self.lo, float).reshape(2)
        self.hi = (np.asarray(WORKSPACE_SIZE[:2], float) if self.hi is None
                   else np.asarray(self.hi, float).reshape(2))

    def contains(self, p) -> bool:
        p = np.asarray(p, float)[:2]
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass
class Heightmaps:
    """Per-cell colour and height; axis 0 runs along world x, axis 1 along y."""
    rgb: np.ndarray      # (H, W, 3)
    depth: np.ndarray    # (H, W) meters above the table
    cell_size: float = CELL_SIZE
    origin: np.ndarray = None  # world (x, y) of the lower corner of cell (0, 0)

    def __post_init__(self):
        self.depth = np.asarray(self.depth, float)
        self.rgb = np.asarray(self.rgb, float)
        if self.origin is None:
            self.origin = np.zeros(2)
        self.origin = np.asarray(self.origin, float).reshape(2)
        if self.rgb.shape != self.depth.shape + (3,):
            raise ValueError("rgb must be (H, W, 3) matching depth")
        if np.any(self.depth < 0):
            raise ValueError("depth must be non-negative")

    @property
    def shape(self):
        return self.depth.shape

    def cell_of(self, p):
        """Integer cell containing the (x, y) of ``p``."""
        p = np.asarray(p, float)[:2]
        return tuple(int(v) for v in np.floor((p - self.origin) / self.cell_size))

    def cell_center(self, i, j) -> np.ndarray:
        return self.origin + (np.array([i, j], float) + 0.5) * self.cell_size


def render_heightmaps(scene, workspace: Workspace = None, cell_size: float = CELL_SIZE
                      ) -> Heightmaps:
    """Top-surface height and colour of the scene seen straight down.

    A cell belongs to an object footprint when its center lies in ``[lo, hi)``.
    The highest covering surface wins.
    """
    ws = Workspace() if workspace is None else workspace
    n = np.round((ws.hi - ws.lo) / cell_size).astype(int)
    depth = np.zeros(tuple(n))
    rgb = np.tile(np.asarray(TABLE_RGB, float), (n[0], n[1], 1))
    cx = ws.lo[0] + (np.arange(n[0]) + 0.5) * cell_size
    cy = ws.lo[1] + (np.arange(n[1]) + 0.5) * cell_size
    for obj in scene.objects:
        ix = np.flatnonzero((cx >= obj.lo[0]) & (cx < obj.hi[0]))
        iy = np.flatnonzero((cy >= obj.lo[1]) & (cy < obj.hi[1]))
        if ix.size == 0 or iy.size == 0:
            continue
        block = np.ix_(ix, iy)
        top = max(float(obj.hi[2]), 0.0)
        higher = depth[block] < top
        depth[block] = np.where(higher, top, depth[block])
        rgb[block] = np.where(higher[..., None], np.asarray(obj.rgb, float), rgb[block])
    return Heightmaps(rgb, depth, cell_size, ws.lo.copy())


def crop_around_rfid(hm: Heightmaps, p, crop_m: float = CROP_SIZE,
                     workspace: Workspace = None) -> Heightmaps:
    """Square window of side ``crop_m`` around the cell holding ``p``.

    Cells beyond the heightmap are zero padded.  The cell containing ``p`` sits
    at index ``(n // 2, n // 2)`` of the crop.
    """
    if crop_m <= 0:
        raise ValueError("crop size must be positive")
    p = np.asarray(getattr(p, "p", p), float)
    ws = workspace if workspace is not None else Workspace(
        hm.origin, hm.origin + np.array(hm.shape) * hm.cell_size)
    if not ws.contains(p):
        raise RfOutOfWorkspace(f"RF estimate {p[:2]} outside workspace {ws.lo}..{ws.hi}")
    n = int(round(crop_m / hm.cell_size))
    ci, cj = hm.cell_of(p)
    i0, j0 = ci - n // 2, cj - n // 2
    depth = np.zeros((n, n))
    rgb = np.zeros((n, n, 3))
    H, W = hm.shape
    si, sj = max(i0, 0), max(j0, 0)
    ei, ej = min(i0 + n, H), min(j0 + n, W)
    if si < ei and sj < ej:
        depth[si - i0:ei - i0, sj - j0:ej - j0] = hm.depth[si:ei, sj:ej]
        rgb[si - i0:ei - i0, sj - j0:ej - j0] = hm.rgb[si:ei, sj:ej]
    origin = hm.origin + np.array([i0, j0]) * hm.cell_size
    return Heightmaps(rgb, depth, hm.cell_size, origin)


@dataclass
class RfKernel:
    values: np.ndarray
    center: tuple
    std_cells: float


def rf_kernel(p, sigma: float, hm: Heightmaps) -> RfKernel:
    """Peak-normalised Gaussian over ``hm``'s cells, centred on ``p``'s cell."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    center = hm.cell_of(np.asarray(getattr(p, "p", p), float))
    std = sigma / hm.cell_size
    ii, jj = np.meshgrid(np.arange(hm.shape[0]), np.arange(hm.shape[1]), indexing="ij")
    r2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2
    if np.isinf(std):
        values = np.ones(hm.shape)
    else:
        values = np.exp(-r2 / (2.0 * std * std))
    return RfKernel(values, center, float(std))


def uniform_kernel(hm: Heightmaps) -> RfKernel:
    return RfKernel(np.ones(hm.shape), (hm.shape[0] // 2, hm.shape[1] // 2), float("inf"))
