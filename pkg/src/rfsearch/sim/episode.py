"""Explore-then-grasp episodes for the RF-guided system and the colour baseline."""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .. import servo, world
from ..belief import BeliefModel, BeliefState, CameraIntrinsics
from ..errors import RfOutOfWorkspace
from ..grasp import heightmap as hmap
from ..grasp.policy import GraspState, Policy, ScriptedPolicy, blocked_mask
from ..rfsense import RfTrack, confirm_pickup, localize
from ..servo import (CostWeights, PlannerConfig, RobotState, TerminationConfig,
                     TerminationReason)
from .baseline import baseline_planner
from .physics import LIFT_HEIGHT, OutcomeKind, execute_grasp
from .scenario import Scenario


class System(enum.Enum):
    RF_GUIDED = "RfGuided"
    BASELINE = "Baseline"


@dataclass(frozen=True)
class EpisodeBudget:
    max_explore_distance: float = 5.0
    max_grasp_attempts: int = 10

    def __post_init__(self):
        if self.max_explore_distance < 0 or self.max_grasp_attempts < 0:
            raise ValueError("budgets must be non-negative")


@dataclass(frozen=True)
class EpisodeConfig:
    planner: PlannerConfig = field(default_factory=lambda: PlannerConfig(max_iter=60))
    weights: CostWeights = field(default_factory=CostWeights)
    termination: TerminationConfig = field(default_factory=TerminationConfig)
    steps_per_plan: int = 4
    travel_per_plan: float = 0.5
    max_replans: int = 60
    max_stalls: int = 10
    stall_distance: float = 0.01
    restart_step: float = 0.1
    robot_cov: float = 1e-4
    baseline_pixels: int = 100
    render_size: tuple = (160, 120)
    collision_margin: float = 0.03
    crop_m: float = hmap.CROP_SIZE
    rf_fixes: int = 4


@dataclass
class EpisodeMetrics:
    system: str
    seed: int
    M: int
    N: int
    traveled_distance: float = 0.0
    explore_distance: float = 0.0
    grasp_attempts: int = 0
    successful: bool = False
    target_grasped_at_attempt: Optional[int] = None
    wall_steps: int = 0
    replans: int = 0
    termination: str = TerminationReason.NONE.value
    path: list = field(default_factory=list)

    def as_row(self) -> dict:
        d = asdict(self)
        d.pop("path")
        return d


def _path_length(points) -> float:
    pts = np.asarray(points, float).reshape(-1, 3)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))


class _Episode:
    """Mutable state of one episode; ``run_episode`` drives it."""

    def __init__(self, scenario: Scenario, system: System, policy: Policy,
                 budget: EpisodeBudget, config: EpisodeConfig, log=None):
        self.scn = scenario
        self.system = system
        self.budget = budget
        self.cfg = config
        self.scene = scenario.make_scene()
        self.tag = scenario.target_tag
        self.intr = scenario.config.intrinsics()
        self.model = BeliefModel(camera=CameraIntrinsics(**self.intr))
        self.rng = np.random.default_rng([scenario.seed, 7])
        # restarts draw from their own stream so RF noise stays aligned across variants
        self.restart_rng = np.random.default_rng([scenario.seed, 11])
        self.track = RfTrack(self.tag)
        self.x = np.array(scenario.start, float)
        self.grid = world.VoxelGrid.empty()
        self.log = log
        self.policy = (ScriptedPolicy(self.scene, self.tag)
                       if isinstance(policy, ScriptedPolicy) else policy)
        self.m = EpisodeMetrics(system.value, scenario.seed, scenario.M, scenario.N)
        self.m.path.append(self.x[:3].tolist())
        self.held = None
        self.last_centroid = None
        self.records = []
        self.planner = (config.planner if system is System.RF_GUIDED
                                      else baseline_planner(config.planner))

    # -- sensing --
    @property
    def camera(self) -> world.CameraPose:
        return world.CameraPose.from_rotvec(self.x[:3], self.x[3:], **self.intr)

    def observe(self):
        self.grid = world.integrate_observation(self.grid, self.camera, self.scene)

    def rf_fix(self):
        scene = self.scene
        if self.held is not None:
            scene = world.Scene(list(self.scene.objects) + [self.held])
        est = localize(self.tag, scene, self.rng, self.scn.config.rf_sigma,
                       self.track.next_timestamp)
        self.track.append(est)
        return est

    def emit(self, **rec):
        rec.update(system=self.system.value, seed=self.scn.seed)
        if self.log is not None:
            self.log.append(rec)

    # -- exploration --
    def regions(self, p):
        rf = p if self.system is System.RF_GUIDED else None
        return world.extract_occluded_regions(self.grid, self.cfg.planner.max_regions, rf)

    def belief(self, regions):
        return BeliefState.from_regions(regions, self.cfg.robot_cov * np.eye(6))

    def check(self, p):
        if self.system is System.BASELINE:
            w, h = self.cfg.render_size
            n = world.count_target_pixels(self.camera, self.scene, w, h)
            if n > self.cfg.baseline_pixels:
                return True, "TargetPixels"
            return False, TerminationReason.NONE.value
        regs = self.regions(p)
        b = self.belief(regs) if regs else None
        done, reason = servo.should_terminate(b, self.grid, p, self.cfg.termination)
        return done, reason.value

    def move(self, u, remaining):
        """Apply one control, truncated by real collisions and the travel left."""
        nxt = self.x + u
        lo, hi = self.scene.boxes()
        nxt[:3] = servo.truncate_against_boxes(self.x[:3], nxt[:3], lo - self.cfg.collision_margin,
                                               hi + self.cfg.collision_margin)
        step = np.linalg.norm(nxt[:3] - self.x[:3])
        if step > remaining:
            f = remaining / step
            nxt = self.x + f * (nxt - self.x)
            step = remaining
        moved = np.max(np.abs(nxt - self.x)) > 1e-12
        self.x = nxt
        self.m.explore_distance += step
        self.m.path.append(self.x[:3].tolist())
        return step, moved

    def explore(self) -> bool:
        cfg = self.cfg
        rf = self.system is System.RF_GUIDED
        self.observe()
        p = self.rf_fix().p if rf else None
        stalls = 0
        while True:
            done, reason = self.check(p)
            if done:
                self.m.termination = reason
                return True
            left = self.budget.max_explore_distance - self.m.explore_distance
            if left <= 1e-12 or self.m.replans >= cfg.max_replans or stalls >= cfg.max_stalls:
                return False
            regs = self.regions(p)
            if not regs:
                return False
            belief = self.belief(regs)
            T = cfg.planner.horizon
            if stalls:
                init = self.restart_seed(T)
            elif rf:
                init = servo.controls_from_waypoints(servo.initial_trajectory(
                    self.x, p, T, cfg.planner.limits, cfg.planner.standoff))
            else:
                init = np.zeros((T, 6))
            boxes = world.extract_frontier_boxes(self.grid)
            plan = servo.optimize_trajectory(belief, self.grid, cfg.weights, init, T,
                                             start=self.x, model=self.model, config=self.planner,
                                             replan_index=self.m.replans, frontier_boxes=boxes)
            frac = world.visible_fraction(self.grid, p, cfg.termination.vicinity) if rf else None
            rec = servo.trace_record(self.m.replans, plan, float(np.trace(belief.covs[0])), frac)
            self.records.append(rec)
            self.emit(event="replan", **rec)
            self.m.replans += 1
            travelled = 0.0
            before = self.x[:3].copy()
            for u in plan.controls[:cfg.steps_per_plan]:
                remaining = min(self.budget.max_explore_distance - self.m.explore_distance,
                                cfg.travel_per_plan - travelled)
                if remaining <= 1e-12:
                    break
                step, _ = self.move(u, remaining)
                travelled += step
                self.observe()
                self.m.wall_steps += 1
                if rf:
                    p = self.rf_fix().p
                self.emit(event="step", step=self.m.wall_steps, position=self.x[:3].tolist(),
                          explore_distance=self.m.explore_distance)
                done, reason = self.check(p)
                if done:
                    self.m.termination = reason
                    return True
            net = np.linalg.norm(self.x[:3] - before)
            stalls = 0 if net >= cfg.stall_distance else stalls + 1

    def restart_seed(self, T):
        """Constant push in a random direction, used after a plan that went nowhere."""
        d = self.restart_rng.normal(size=3)
        d /= np.linalg.norm(d)
        u = np.zeros((T, 6))
        u[:, :3] = self.cfg.restart_step * d
        return u

    # -- grasping --
    def grasp_center(self):
        if self.system is System.RF_GUIDED:
            est = self.rf_fix()
            return est.p, est.sigma
        w, h = self.cfg.render_size
        c = world.target_pixel_centroid(self.camera, self.scene, w, h)
        if c is not None:
            self.last_centroid = c
        return self.last_centroid, 0.0

    def grasp(self):
        failed = []
        ws = hmap.Workspace()
        while self.m.grasp_attempts < self.budget.max_grasp_attempts:
            center, sigma = self.grasp_center()
            if center is None:
                return
            center = np.array(center, float)
            try:
                state = GraspState.build(self.scene, center, sigma, self.cfg.crop_m, ws)
            except RfOutOfWorkspace:
                center[:2] = np.clip(center[:2], ws.lo, ws.hi - 1e-9)
                state = GraspState.build(self.scene, center, sigma, self.cfg.crop_m, ws)
            action = self.policy.act(state, self.rng, blocked_mask(failed, state.crop))
            self.m.grasp_attempts += 1
            approach = np.array(action.g, float)
            lifted = approach + np.array([0.0, 0.0, LIFT_HEIGHT])
            self.m.path += [approach.tolist(), lifted.tolist()]
            if self.system is System.RF_GUIDED:
                for _ in range(self.cfg.rf_fixes - 1):
                    self.rf_fix()
            target_before = self.scene.by_tag(self.tag)
            outcome = execute_grasp(self.scene, action, self.tag)
            if outcome.kind is OutcomeKind.GRASPED_TARGET:
                self.held = target_before.translated([0.0, 0.0, LIFT_HEIGHT])
            self.x[:3] = lifted
            if self.system is System.RF_GUIDED:
                for _ in range(self.cfg.rf_fixes):
                    self.rf_fix()
                ok = confirm_pickup(self.track, [0.0, 0.0, LIFT_HEIGHT],
                                    window=self.cfg.rf_fixes)
            else:
                ok = outcome.kind is OutcomeKind.GRASPED_TARGET
            self.emit(event="grasp", attempt=self.m.grasp_attempts, g=action.g.tolist(),
                      theta=float(action.theta), outcome=outcome.kind.value,
                      d=outcome.d, confirmed=bool(ok))
            if ok and outcome.kind is OutcomeKind.GRASPED_TARGET:
                self.m.successful = True
                self.m.target_grasped_at_attempt = self.m.grasp_attempts
                return
            if outcome.kind is OutcomeKind.GRASPED_TARGET:
                # lifted but not confirmed: put it back where it was
                self.scene.objects.append(target_before)
                self.held = None
            if not outcome.grasped:
                failed.append((action.k, action.g))


def run_episode(scenario: Scenario, system, policy: Policy,
                budget: EpisodeBudget = EpisodeBudget(),
                config: EpisodeConfig = EpisodeConfig(), log: Optional[list] = None,
                planner_trace: Optional[list] = None,
                artifacts: Optional[dict] = None) -> EpisodeMetrics:
    """Explore until the halting rule fires, then grasp until success or budget.

    ``log`` (a list) receives one dict per step, replan and grasp; the
    planner's per-replan records are appended to ``planner_trace``.  A dict
    passed as ``artifacts`` receives the final voxel grid and scene.
    """
    system = System(system) if not isinstance(system, System) else system
    ep = _Episode(scenario, system, policy, budget, config, log)
    if ep.explore():
        ep.grasp()
    ep.m.traveled_distance = _path_length(ep.m.path)
    if planner_trace is not None:
        planner_trace.extend(ep.records)
    if artifacts is not None:
        artifacts.update(grid=ep.grid, scene=ep.scene, track=ep.track)
    return ep.m


def write_episode_log(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
