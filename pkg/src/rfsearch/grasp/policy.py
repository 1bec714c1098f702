"""Affordance-map grasp selection with RF attention."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import InvalidAffordance, ShapeError
from . import heightmap as hmap
from .qnet import N_ROTATIONS, QFunctionParams, q_forward, rotation_angle


@dataclass
class GraspAction:
    g: np.ndarray          # grasp point, meters
    theta: float           # jaw angle about +z, radians
    k: int = 0             # rotation index
    cell: tuple = (0, 0)   # crop cell

    def __post_init__(self):
        self.g = np.asarray(self.g, float).reshape(3)

    @classmethod
    def from_index(cls, k, cell, crop: hmap.Heightmaps):
        i, j = int(cell[0]), int(cell[1])
        xy = crop.cell_center(i, j)
        return cls(np.array([xy[0], xy[1], crop.depth[i, j]]), rotation_angle(k), int(k), (i, j))

    @property
    def jaw_direction(self) -> np.ndarray:
        return np.array([np.cos(self.theta), np.sin(self.theta)])


@dataclass
class GraspState:
    """Network input for one grasp decision: the crop and its RF kernel."""
    crop: hmap.Heightmaps
    kernel: hmap.RfKernel

    @classmethod
    def build(cls, scene, p, sigma, crop_m=hmap.CROP_SIZE, workspace=None):
        full = hmap.render_heightmaps(scene, workspace)
        crop = hmap.crop_around_rfid(full, p, crop_m, workspace)
        kernel = hmap.rf_kernel(p, sigma, crop) if sigma > 0 else hmap.uniform_kernel(crop)
        return cls(crop, kernel)


def apply_kernel(maps, kernel) -> np.ndarray:
    """Multiply every rotation's map by the kernel."""
    maps = np.asarray(maps, float)
    values = np.asarray(getattr(kernel, "values", kernel), float)
    if maps.shape[-2:] != values.shape:
        raise ShapeError(f"maps {maps.shape} vs kernel {values.shape}")
    return maps * values


def best_index(maps):
    """Argmax over (rotation, row, col); ties go to the lowest rotation, then
    row-major cell order.  NaN cells are ignored."""
    maps = np.asarray(maps, float)
    if maps.ndim != 3:
        raise ShapeError(f"expected (R, H, W) maps, got {maps.shape}")
    if not np.any(np.isfinite(maps)):
        raise InvalidAffordance("no finite affordance value")
    flat = np.where(np.isfinite(maps), maps, -np.inf).ravel()
    # np.argmax returns the first maximum in C order, which is exactly the tie rule
    k, i, j = np.unravel_index(int(np.argmax(flat)), maps.shape)
    return int(k), (int(i), int(j))


def select_action(final_maps, crop: Optional[hmap.Heightmaps] = None,
                  rng: Optional[np.random.Generator] = None, epsilon: float = 0.0,
                  blocked=None) -> GraspAction:
    """Greedy (or epsilon-greedy) grasp from final affordance maps.

    ``blocked`` is an optional boolean mask of (rotation, cell) entries that
    must not be chosen, used to avoid repeating a failed grasp.
    """
    maps = np.array(final_maps, float)
    if blocked is not None:
        maps = np.where(blocked, np.nan, maps)
    if rng is not None and epsilon > 0 and rng.random() < epsilon:
        free = np.argwhere(np.isfinite(maps))
        if len(free) == 0:
            raise InvalidAffordance("no finite affordance value")
        k, i, j = free[rng.integers(len(free))]
        k, cell = int(k), (int(i), int(j))
    else:
        k, cell = best_index(maps)
    if crop is None:
        h, w = maps.shape[1:]
        crop = hmap.Heightmaps(np.zeros((h, w, 3)), np.zeros((h, w)))
    return GraspAction.from_index(k, cell, crop)


def epsilon_schedule(iteration: int, n_iterations: int, start=0.5, end=0.1) -> float:
    """Linear exploration decay from ``start`` to ``end`` over training."""
    if n_iterations <= 1:
        return end
    f = min(max(iteration / (n_iterations - 1), 0.0), 1.0)
    return start + (end - start) * f


class Policy:
    """Interface for grasp policies used by episodes."""

    name = "policy"

    def act(self, state: GraspState, rng, blocked=None) -> GraspAction:
        raise NotImplementedError


@dataclass
class QPolicy(Policy):
    params: QFunctionParams
    use_kernel: bool = True
    epsilon: float = 0.0
    name: str = "q"

    def maps(self, state: GraspState) -> np.ndarray:
        q = q_forward(state.crop.rgb, state.crop.depth, self.params)
        return apply_kernel(q, state.kernel) if self.use_kernel else q

    def act(self, state: GraspState, rng=None, blocked=None) -> GraspAction:
        return select_action(self.maps(state), state.crop, rng, self.epsilon, blocked)


@dataclass
class RandomPolicy(Policy):
    """Uniform random rotation and cell inside the crop."""
    name: str = "random"

    def act(self, state: GraspState, rng, blocked=None) -> GraspAction:
        H, W = state.crop.shape
        maps = np.zeros((N_ROTATIONS, H, W))
        return select_action(maps, state.crop, rng, 1.0, blocked)


@dataclass
class ScriptedPolicy(Policy):
    """Oracle grasp on whatever tops the true target, at its footprint center,
    using the first rotation the grasp physics accepts.  Used where grasp
    quality must not matter."""
    scene: object = None
    tag: int = None
    name: str = "scripted"

    def act(self, state: GraspState, rng=None, blocked=None) -> GraspAction:
        from ..sim.physics import grasp_feasibility
        target = self.scene.by_tag(self.tag)
        covering = [o for o in self.scene.objects if o is not target and o.lo[2] >= target.hi[2] - 1e-9
                    and np.all(o.lo[:2] < target.hi[:2]) and np.all(o.hi[:2] > target.lo[:2])]
        obj = max(covering, key=lambda o: o.hi[2]) if covering else target
        c = obj.center
        g = np.array([c[0], c[1], obj.hi[2]])
        k_ok = 0
        for k in range(N_ROTATIONS):
            if grasp_feasibility(self.scene, g, rotation_angle(k))[0] is obj:
                k_ok = k
                break
        return GraspAction(g, rotation_angle(k_ok), k_ok, state.crop.cell_of(c))


def blocked_mask(failed, crop: hmap.Heightmaps, radius_cells: int = 1) -> np.ndarray:
    """Mask of (rotation, cell) entries near previously failed grasps."""
    H, W = crop.shape
    mask = np.zeros((N_ROTATIONS, H, W), bool)
    for k, g in failed:
        i, j = crop.cell_of(g)
        i0, i1 = max(i - radius_cells, 0), min(i + radius_cells + 1, H)
        j0, j1 = max(j - radius_cells, 0), min(j + radius_cells + 1, W)
        if i0 < i1 and j0 < j1:
            mask[k, i0:i1, j0:j1] = True
    return mask
