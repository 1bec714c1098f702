"""Seeded scenario generation for search episodes and grasp-only scenes."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .. import geometry, world
from .physics import grasp_feasibility
from ..errors import ScenarioInfeasible
from ..world import ColorClass, ObjectKind, SceneObject

TARGET_TAG = 1

PALETTE = (
    (0.85, 0.15, 0.15), (0.15, 0.3, 0.85), (0.9, 0.8, 0.1), (0.95, 0.5, 0.1),
    (0.55, 0.2, 0.7), (0.1, 0.75, 0.8), (0.6, 0.4, 0.25), (0.9, 0.45, 0.65),
)
OBSTACLE_RGB = (0.55, 0.55, 0.55)
COVER_RGB = (0.35, 0.3, 0.6)


@dataclass(frozen=True)
class ScenarioConfig:
    start_position: tuple = (0.4, -0.1, 0.5)
    start_look_at: tuple = (0.4, 0.6, 0.0)
    obstacle_size: tuple = (0.15, 0.3)
    obstacle_y: tuple = (0.3, 1.05)
    block_size: tuple = (0.03, 0.06)
    target_gap: tuple = (0.01, 0.05)
    min_gap: float = 0.01
    obstacle_gap: float = 0.05
    clutter_fraction: float = 0.5
    clutter_radius: tuple = (0.08, 0.16)
    cover: bool = False
    rf_sigma: float = 0.01
    max_tries: int = 1000
    fov_h: float = 1.2
    fov_v: float = 0.9
    near: float = 0.05
    far: float = 1.2

    def intrinsics(self) -> dict:
        return dict(fov_h=self.fov_h, fov_v=self.fov_v, near=self.near, far=self.far)


@dataclass
class Scenario:
    seed: int
    M: int
    N: int
    target_tag: int
    objects: list
    start: np.ndarray
    covers: bool = False
    attempts: int = 1
    config: ScenarioConfig = field(default_factory=ScenarioConfig)

    def make_scene(self) -> world.Scene:
        return world.Scene([SceneObject.from_dict(o.to_dict()) for o in self.objects])

    def make_grid(self) -> world.VoxelGrid:
        return world.VoxelGrid.empty()

    def start_camera(self) -> world.CameraPose:
        return world.CameraPose.from_rotvec(self.start[:3], self.start[3:],
                                            **self.config.intrinsics())

    def to_dict(self) -> dict:
        return {"seed": self.seed, "M": self.M, "N": self.N, "target_tag": self.target_tag,
                "covers": self.covers, "attempts": self.attempts,
                "start": list(map(float, self.start)),
                "objects": [o.to_dict() for o in self.objects],
                "config": asdict(self.config)}

    @classmethod
    def from_dict(cls, d) -> "Scenario":
        if d.get("config"):
            cfg = ScenarioConfig(**{k: tuple(v) if isinstance(v, list) else v
                                    for k, v in d["config"].items()})
        else:
            cfg = ScenarioConfig(cover=bool(d.get("covers", False)))
        if d.get("objects") is None:
            return generate_scenario(int(d["M"]), int(d["N"]), int(d["seed"]), cfg)
        return cls(int(d["seed"]), int(d["M"]), int(d["N"]), int(d["target_tag"]),
                   [SceneObject.from_dict(o) for o in d["objects"]],
                   np.asarray(d["start"], float), bool(d.get("covers", False)),
                   int(d.get("attempts", 1)), cfg)


def save_scenario(scn: Scenario, path):
    Path(path).write_text(json.dumps(scn.to_dict(), indent=2))


def load_scenario(path) -> Scenario:
    return Scenario.from_dict(json.loads(Path(path).read_text()))


def start_state(cfg: ScenarioConfig) -> np.ndarray:
    R = geometry.look_at_matrix(cfg.start_position, cfg.start_look_at)
    return np.concatenate([np.asarray(cfg.start_position, float), geometry.matrix_to_rotvec(R)])


# --- placement helpers --------------------------------------------------------

def _gap_ok(lo, hi, others, gap):
    for o in others:
        if np.all(lo[:2] < o.hi[:2] + gap) and np.all(hi[:2] > o.lo[:2] - gap):
            return False
    return True


def _inside_workspace(lo, hi, size=world.WORKSPACE_SIZE, margin=0.0):
    return bool(np.all(lo[:2] >= margin) and np.all(hi[:2] <= np.asarray(size[:2]) - margin))


def _shadows_disjoint(obstacles, camera: world.CameraPose, grid: world.VoxelGrid) -> bool:
    """No voxel center is hidden behind two different obstacles."""
    if len(obstacles) < 2:
        return True
    centers = grid.centers()
    inside = world.in_frustum(centers, camera)
    v = centers[inside]
    lo = np.array([o.lo for o in obstacles])
    hi = np.array([o.hi for o in obstacles])
    t0, t1 = geometry.segment_box_entry(camera.position, v, lo, hi)
    t0 = np.maximum(t0, 0.0)
    hits = (t0 <= t1) & (t0 <= 1.0)
    return bool(np.all(hits.sum(axis=1) <= 1))


def _sample_block(rng, cfg, center_xy, oid, rgb, color_class=ColorClass.DISTRACTOR, tag=None):
    s = rng.uniform(*cfg.block_size, size=3)
    lo = np.array([center_xy[0] - s[0] / 2, center_xy[1] - s[1] / 2, 0.0])
    return SceneObject(oid, ObjectKind.BLOCK, lo, lo + s, tag, color_class, tuple(rgb))


def _place_distractors(rng, cfg, objects, target, N, first_id, palette):
    placed = []
    n_clutter = int(round(cfg.clutter_fraction * N))
    for n in range(N):
        for _ in range(200):
            if n < n_clutter:
                ang = rng.uniform(0, 2 * np.pi)
                r = rng.uniform(*cfg.clutter_radius)
                xy = target.center[:2] + r * np.array([np.cos(ang), np.sin(ang)])
            else:
                xy = rng.uniform([0.05, 0.05], np.asarray(world.WORKSPACE_SIZE[:2]) - 0.05)
            rgb = palette[rng.integers(len(palette))]
            b = _sample_block(rng, cfg, xy, first_id + n, rgb)
            if _inside_workspace(b.lo, b.hi, margin=0.01) and _gap_ok(
                    b.lo, b.hi, objects + placed, cfg.min_gap):
                placed.append(b)
                break
        else:
            return None
    return placed


def _cover_for(target, oid, others, size=0.08, thickness=0.01):
    c = target.center
    lo = np.array([c[0] - size / 2, c[1] - size / 2, target.hi[2]])
    hi = np.array([c[0] + size / 2, c[1] + size / 2, target.hi[2] + thickness])
    if not _gap_ok(lo, hi, [o for o in others if o is not target], 0.0):
        return None
    return SceneObject(oid, ObjectKind.COVER, lo, hi, None, ColorClass.DISTRACTOR, COVER_RGB)


def target_graspable(scene, target) -> bool:
    """Some rotation grasps the target at its footprint center."""
    g = np.array([target.center[0], target.center[1], target.hi[2]])
    return any(grasp_feasibility(scene, g, 2 * np.pi * k / 16)[0] is target for k in range(16))


def generate_scenario(M: int, N: int, seed: int, config: Optional[ScenarioConfig] = None
                      ) -> Scenario:
    """Rejection-sample a layout with ``M`` occluders and ``N`` distractors.

    Occluders are boxes whose shadows from the start pose are pairwise
    disjoint.  With ``M >= 1`` the target sits right behind one of them and is
    initially hidden (vicinity visible fraction below 0.1); with ``M = 0`` the
    target is in plain view of the start camera.
    """
    cfg = config or ScenarioConfig()
    if not 0 <= M <= 5:
        raise ValueError("M must be in 0..5")
    if not 1 <= N <= 15:
        raise ValueError("N must be in 1..15")
    rng = np.random.default_rng(seed)
    x0 = start_state(cfg)
    camera = world.CameraPose.from_rotvec(x0[:3], x0[3:], **cfg.intrinsics())
    grid0 = world.VoxelGrid.empty()
    W = np.asarray(world.WORKSPACE_SIZE)
    for attempt in range(1, cfg.max_tries + 1):
        # shrink the sampled obstacle sizes toward the lower bound as attempts fail
        lo_s, hi_s = cfg.obstacle_size
        hi_s = hi_s - (hi_s - lo_s) * min(1.0, attempt / (0.5 * cfg.max_tries))
        obstacles = []
        for m in range(M):
            for _ in range(50):
                s = rng.uniform(lo_s, max(hi_s, lo_s), size=3)
                lo = np.array([rng.uniform(0.02, W[0] - 0.02 - s[0]),
                               rng.uniform(cfg.obstacle_y[0], cfg.obstacle_y[1] - s[1]), 0.0])
                if _gap_ok(lo, lo + s, obstacles, cfg.obstacle_gap):
                    obstacles.append(SceneObject(10 + m, ObjectKind.OBSTACLE, lo, lo + s,
                                                 None, ColorClass.DISTRACTOR, OBSTACLE_RGB))
                    break
        if len(obstacles) < M or not _shadows_disjoint(obstacles, camera, grid0):
            continue
        if M >= 1:
            host = obstacles[rng.integers(M)]
            xy = np.array([rng.uniform(host.lo[0] + 0.03, host.hi[0] - 0.03),
                           host.hi[1] + rng.uniform(*cfg.target_gap) + cfg.block_size[1] / 2])
        else:
            xy = np.array([rng.uniform(0.2, 0.6), rng.uniform(0.35, 0.75)])
        target = _sample_block(rng, cfg, xy, 0, world.TARGET_RGB, ColorClass.TARGET, TARGET_TAG)
        if not _inside_workspace(target.lo, target.hi, margin=0.02) or not _gap_ok(
                target.lo, target.hi, obstacles, cfg.min_gap):
            continue
        distractors = _place_distractors(rng, cfg, obstacles + [target], target, N, 20, PALETTE)
        if distractors is None:
            continue
        objects = obstacles + [target] + distractors
        if cfg.cover:
            cover = _cover_for(target, 50, objects)
            if cover is None:
                continue
            objects.append(cover)
        scene = world.Scene(objects)
        if not cfg.cover and not target_graspable(scene, target):
            continue
        grid = world.integrate_observation(grid0, camera, scene)
        frac = world.visible_fraction(grid, target.center)
        if M >= 1 and frac >= 0.1:
            continue
        if M == 0 and (frac <= 0.1 or world.count_target_pixels(camera, scene) == 0):
            continue
        return Scenario(seed, M, N, TARGET_TAG, objects, x0, cfg.cover, attempt, cfg)
    raise ScenarioInfeasible(f"no valid layout for M={M}, N={N}, seed={seed} "
                             f"after {cfg.max_tries} tries")


# --- grasp-only scenes --------------------------------------------------------

@dataclass(frozen=True)
class GraspSceneConfig:
    n_distractors: tuple = (3, 6)
    target_size: tuple = (0.025, 0.05)
    target_height: tuple = (0.03, 0.06)
    block_size: tuple = (0.025, 0.05)
    gap: tuple = (0.01, 0.04)
    cover_prob: float = 0.15
    rf_sigma: float = 0.01


def generate_grasp_scene(seed: int, config: Optional[GraspSceneConfig] = None):
    """Tight clutter around an RF-tagged target whose colour gives nothing away.

    Returns ``(scene, target_tag)``.
    """
    cfg = config or GraspSceneConfig()
    rng = np.random.default_rng(seed)
    for _ in range(1000):
        c = rng.uniform([0.15, 0.15], [0.65, 1.05])
        st = np.append(rng.uniform(*cfg.target_size, size=2), rng.uniform(*cfg.target_height))
        lo = np.array([c[0] - st[0] / 2, c[1] - st[1] / 2, 0.0])
        target = SceneObject(0, ObjectKind.BLOCK, lo, lo + st, TARGET_TAG,
                             ColorClass.TARGET, PALETTE[rng.integers(len(PALETTE))])
        objects = [target]
        n = int(rng.integers(cfg.n_distractors[0], cfg.n_distractors[1] + 1))
        for k in range(n):
            for _ in range(100):
                ang = rng.uniform(0, 2 * np.pi)
                s = np.append(rng.uniform(*cfg.block_size, size=2),
                              rng.uniform(*cfg.target_height))
                r = rng.uniform(*cfg.gap) + 0.5 * (np.hypot(*st[:2]) + np.hypot(*s[:2]))
                xy = c + r * np.array([np.cos(ang), np.sin(ang)])
                blo = np.array([xy[0] - s[0] / 2, xy[1] - s[1] / 2, 0.0])
                if _gap_ok(blo, blo + s, objects, 0.005) and _inside_workspace(blo, blo + s):
                    objects.append(SceneObject(1 + k, ObjectKind.BLOCK, blo, blo + s, None,
                                               ColorClass.DISTRACTOR,
                                               PALETTE[rng.integers(len(PALETTE))]))
                    break
        if rng.random() < cfg.cover_prob:
            size = 0.07
            clo = np.array([c[0] - size / 2, c[1] - size / 2, 0.0])
            chi = clo + np.array([size, size, 0.01])
            under = [o for o in objects if np.all(o.lo[:2] < chi[:2]) and np.all(o.hi[:2] > clo[:2])]
            z = max(o.hi[2] for o in under)
            objects.append(SceneObject(40, ObjectKind.COVER, [clo[0], clo[1], z],
                                       [chi[0], chi[1], z + 0.01], None,
                                       ColorClass.DISTRACTOR, COVER_RGB))
        return world.Scene(objects), TARGET_TAG
    raise ScenarioInfeasible(f"grasp scene seed {seed}")
