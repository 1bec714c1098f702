"""RF-biased belief-space exploration planner.

The robot is a free-flying sensor pose ``x = (position, axis-angle)`` with
additive dynamics ``x_{t+1} = x_t + u_t``.  A plan is a stack of ``T``
controls; its cost is the control effort plus the weighted traces of the
region covariances propagated by the visibility-gated EKF.  The region that
contains the RF estimate gets a weight that grows with every replan.

Gradients of the cost come from JAX; everything else is plain numpy.
"""
from __future__ import annotations

import enum
import functools
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

import jax

jax.config.update("jax_enable_x64", True)
import jax.numpy as jnp  # noqa: E402

from . import geometry, world  # noqa: E402
from .belief import ROBOT_DIM, BeliefModel, BeliefState, robot_step  # noqa: E402

DEFAULT_HORIZON = 8
POSITION_SLOTS = slice(0, 3)
ROTATION_SLOTS = slice(3, 6)


# --- configuration ------------------------------------------------------------

@dataclass(frozen=True)
class ControlLimits:
    max_pos: float = 0.15
    max_rot: float = 0.3


@dataclass(frozen=True)
class CostWeights:
    alpha: float = 0.5
    beta0: float = 20.0
    beta_growth: float = 1.5
    beta_other: float = 1.0

    def __post_init__(self):
        if min(self.alpha, self.beta0, self.beta_other) < 0:
            raise ValueError("weights must be non-negative")
        if self.beta_growth < 1:
            raise ValueError("beta_growth must be >= 1")


@dataclass(frozen=True)
class TerminationConfig:
    rho_sigma: float = 0.005
    rho_upsilon: float = 0.1
    vicinity: tuple = world.DEFAULT_VICINITY

    def __post_init__(self):
        if self.rho_sigma <= 0 or self.rho_upsilon <= 0:
            raise ValueError("termination thresholds must be positive")


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = DEFAULT_HORIZON
    limits: ControlLimits = field(default_factory=ControlLimits)
    max_iter: int = 200
    init_step: float = 0.05      # largest per-entry change of the first trial step
    max_step: float = 0.3
    min_step: float = 1e-6
    ftol: float = 1e-9           # relative decrease counted as progress
    workspace_margin: float = 0.1
    frontier_inflation: float = 0.03
    max_regions: int = 4
    max_patches: int = 48
    standoff: float = 0.15
    uniform_beta: bool = False   # baseline: same weight on every region


@dataclass
class RobotState:
    x: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, float).reshape(ROBOT_DIM)

    @property
    def position(self):
        return self.x[POSITION_SLOTS]

    @property
    def rotvec(self):
        return self.x[ROTATION_SLOTS]

    def camera(self, **intrinsics) -> world.CameraPose:
        return world.CameraPose.from_rotvec(self.position, self.rotvec, **intrinsics)

    @classmethod
    def looking_at(cls, position, target):
        R = geometry.look_at_matrix(position, target)
        return cls(np.concatenate([np.asarray(position, float), geometry.matrix_to_rotvec(R)]))

    def feasible(self, grid: world.VoxelGrid, margin: float = 0.1) -> bool:
        p = self.position
        return bool(np.all(p >= grid.lo - margin - 1e-12) and np.all(p <= grid.hi + margin + 1e-12)
                    and np.linalg.norm(self.rotvec) <= np.pi + 1e-12)


class TerminationReason(enum.Enum):
    TRACE_BELOW = "TraceBelow"
    VICINITY_VISIBLE = "VicinityVisible"
    NONE = "None"


# --- cost pieces --------------------------------------------------------------

def beta_schedule(replan_index: int, weights: CostWeights) -> float:
    """RF-region weight at a replan: ``beta0 * growth**k`` capped at ``1e4 * beta_other``."""
    if replan_index < 0:
        raise ValueError("replan_index must be >= 0")
    cap = 1e4 * weights.beta_other
    with np.errstate(over="ignore"):
        b = weights.beta0 * np.float64(weights.beta_growth) ** int(replan_index)
    return float(min(b, cap))


def region_betas(n_regions: int, weights: CostWeights, replan_index: int = 0,
                 uniform: bool = False) -> np.ndarray:
    if n_regions == 0:
        return np.zeros(0)
    if uniform:
        return np.full(n_regions, float(weights.beta0))
    b = np.full(n_regions, float(weights.beta_other))
    b[0] = beta_schedule(replan_index, weights)
    return b


def stage_cost(x, u, region_covs, weights: CostWeights, replan_index: int = 0,
               uniform: bool = False) -> float:
    """``alpha |u|^2 + sum_m beta_m tr(Sigma_m)`` at one step.

    ``x`` is accepted for interface symmetry; the stage cost does not depend
    on it directly.
    """
    u = np.asarray(u, float)
    covs = np.asarray(region_covs, float).reshape(-1, 3, 3)
    betas = region_betas(len(covs), weights, replan_index, uniform)
    return float(weights.alpha * u @ u + betas @ np.trace(covs, axis1=1, axis2=2))


# --- initial trajectory -----------------------------------------------------

def clip_control(u, limits: ControlLimits) -> np.ndarray:
    u = np.array(u, float)
    for sl, cap in ((POSITION_SLOTS, limits.max_pos), (ROTATION_SLOTS, limits.max_rot)):
        n = np.linalg.norm(u[sl])
        if n > cap:
            u[sl] *= cap / n
    return u


def initial_trajectory(start, p, T: int, limits: ControlLimits = ControlLimits(),
                       standoff: float = 0.15) -> np.ndarray:
    """Straight-line waypoints from ``start`` toward a standoff point before ``p``.

    Returns ``T + 1`` robot states.  Orientation is slerped to look at ``p``.
    Steps respect the control limits, so a far goal is approached only
    partially within the horizon.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    x0 = start.x if isinstance(start, RobotState) else np.asarray(start, float)
    p = np.asarray(p, float)
    c0 = x0[POSITION_SLOTS]
    to_start = c0 - p
    dist = np.linalg.norm(to_start)
    if dist <= standoff:
        return np.tile(x0, (T + 1, 1))
    goal = p + standoff * to_start / dist
    L = dist - standoff
    direction = -to_start / dist
    step = min(L / T, limits.max_pos)
    k = np.arange(T + 1)
    pos = c0 + np.minimum(L, k * step)[:, None] * direction

    r0 = Rotation.from_rotvec(x0[ROTATION_SLOTS])
    r1 = Rotation.from_matrix(geometry.look_at_matrix(goal, p))
    angle = (r0.inv() * r1).magnitude()
    frac_step = 1.0 / T if angle < 1e-12 else min(1.0 / T, limits.max_rot / angle)
    frac = np.minimum(1.0, k * frac_step)
    rots = Slerp([0.0, 1.0], Rotation.concatenate([r0, r1]))(frac).as_rotvec()
    rots[0] = x0[ROTATION_SLOTS]
    way = np.hstack([pos, rots])
    # rotation-vector differences can exceed the limit near the pi wrap
    u = np.diff(way, axis=0)
    u = np.array([clip_control(ui, limits) for ui in u])
    way[1:] = x0 + np.cumsum(u, axis=0)
    way[:, POSITION_SLOTS] = pos
    return way


def controls_from_waypoints(waypoints) -> np.ndarray:
    return np.diff(np.asarray(waypoints, float), axis=0)


def rollout(start, controls) -> np.ndarray:
    x0 = start.x if isinstance(start, RobotState) else np.asarray(start, float)
    return np.vstack([x0, x0 + np.cumsum(np.asarray(controls, float), axis=0)])


# --- feasibility projection ---------------------------------------------------

@dataclass
class Feasible:
    """The state box and keep-out boxes a plan is projected onto."""
    lo: np.ndarray
    hi: np.ndarray
    box_lo: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    box_hi: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    @classmethod
    def from_grid(cls, grid: world.VoxelGrid, margin=0.1, boxes=(), inflation=0.03):
        if boxes:
            blo = np.array([b[0] for b in boxes]) - inflation
            bhi = np.array([b[1] for b in boxes]) + inflation
        else:
            blo = bhi = np.zeros((0, 3))
        return cls(grid.lo - margin, grid.hi + margin, blo, bhi)


def truncate_against_boxes(a, b, box_lo, box_hi, backoff=1e-3, slides=3, climb=True):
    """Move from ``a`` toward ``b`` without entering any box.

    When the segment hits a box face the motion is cut just before the face
    and what remains of it slides along the face, up to ``slides`` times.
    Boxes stand on the table, so with ``climb`` the blocked part of a motion
    into a side face is turned into upward motion instead of being dropped.
    The path never gets longer than ``|b - a|``.  For a box already containing
    ``a`` only the component pushing deeper through the nearest face is removed,
    so the sensor can always back out.  Returns the new end point.
    """
    a = np.asarray(a, float)
    b = np.array(b, float)
    box_lo = np.asarray(box_lo, float).reshape(-1, 3)
    box_hi = np.asarray(box_hi, float).reshape(-1, 3)
    if box_lo.shape[0] == 0:
        return b
    inside = np.all((a >= box_lo) & (a <= box_hi), axis=1)
    for k in np.flatnonzero(inside):
        depth = np.concatenate([a - box_lo[k], box_hi[k] - a])
        f = int(np.argmin(depth))
        axis, outward = f % 3, (-1.0 if f < 3 else 1.0)
        if (b[axis] - a[axis]) * outward < 0:
            b[axis] = a[axis]
    for _ in range(slides + 1):
        if np.allclose(a, b):
            return b
        t0, t1 = geometry.segment_box_entry(a, b[None, :], box_lo, box_hi)
        t0, t1 = t0[0], t1[0]
        enters = (t0 <= t1) & (t0 > 0.0) & (t0 <= 1.0) & ~inside
        if not enters.any():
            return b
        k = int(np.flatnonzero(enters)[np.argmin(t0[enters])])
        t = float(t0[k])
        d = b - a
        seg = np.linalg.norm(d)
        stop = a + max(0.0, t - backoff / max(seg, 1e-12)) * d
        # the entry face is on the axis whose slab is entered last
        with np.errstate(divide="ignore", invalid="ignore"):
            near = np.minimum((box_lo[k] - a) / d, (box_hi[k] - a) / d)
        near = np.where(d == 0.0, -np.inf, near)
        axis = int(np.argmax(near))
        rest = b - stop
        budget = np.linalg.norm(rest)
        if climb and axis < 2:
            rest[2] += abs(rest[axis])
        rest[axis] = 0.0
        # never travel further than the original motion would have
        n = np.linalg.norm(rest)
        if n > budget:
            rest *= budget / n
        a, b = stop, stop + rest
    return a


def project_controls(controls, start, feasible: Feasible, limits: ControlLimits) -> np.ndarray:
    """Walk the plan forward, clipping each control into the feasible sets."""
    x = np.array(start.x if isinstance(start, RobotState) else start, float)
    out = np.empty((len(controls), ROBOT_DIM))
    for t, u in enumerate(np.asarray(controls, float)):
        u = clip_control(u, limits)
        nxt = x + u
        nxt[POSITION_SLOTS] = np.clip(nxt[POSITION_SLOTS], feasible.lo, feasible.hi)
        nxt[POSITION_SLOTS] = truncate_against_boxes(x[POSITION_SLOTS], nxt[POSITION_SLOTS],
                                                     feasible.box_lo, feasible.box_hi)
        nxt[POSITION_SLOTS] = np.clip(nxt[POSITION_SLOTS], feasible.lo, feasible.hi)
        n = np.linalg.norm(nxt[ROTATION_SLOTS])
        if n > np.pi:
            nxt[ROTATION_SLOTS] *= np.pi / n
        out[t] = nxt - x
        x = nxt
    return out


# --- differentiable cost model -------------------------------------------

def _h_joint(z):
    xr, xm = z[:ROBOT_DIM], z[ROBOT_DIM:]
    R = geometry.rotvec_to_matrix(xr[3:], xp=jnp)
    return jnp.concatenate([xr, R.T @ (xm - xr[:3])])


def _constants(model: BeliefModel):
    c = model.camera
    return (float(c.fov_h), float(c.fov_v), float(c.near), float(c.far),
            float(model.obs.kappa), float(model.obs.image_axis_weight),
            float(model.robot_meas_std), float(model.region_std0),
            float(model.region_std_per_m))


@functools.lru_cache(maxsize=16)
def _compiled(consts):
    fov_h, fov_v, near, far, kappa, w_axis, r_std, s0, s1 = consts

    def region_step(xr, xm, P_pred, S, patches, patch_mask):
        H = jax.jacfwd(_h_joint)(jnp.concatenate([xr, xm]))
        diff = xm - xr[:3]
        d = jnp.sqrt(jnp.sum(diff * diff) + 1e-18)
        noise = jnp.concatenate([jnp.full(ROBOT_DIM, r_std), jnp.full(3, s0 + s1 * d)])
        R = geometry.rotvec_to_matrix(xr[3:], xp=jnp)
        sd = geometry.visible_sd(xm, xr[:3], R, fov_h, fov_v, near, far, patches,
                                 patch_mask, xp=jnp)
        rho = geometry.distance_to_axis(xm, xr[:3], R, xp=jnp)
        phi = jax.nn.sigmoid(kappa * (sd + w_axis * rho))
        dvec = jnp.concatenate([jnp.ones(ROBOT_DIM), jnp.full(3, phi)])
        Sig = jnp.zeros((9, 9)).at[:6, :6].set(P_pred).at[6:, 6:].set(S)
        DH = dvec[:, None] * H
        B = DH @ Sig @ DH.T + jnp.diag(noise * noise)
        K = jnp.linalg.solve(B, DH @ Sig).T * dvec[None, :]
        Sig = (jnp.eye(9) - K @ H) @ Sig
        Sig = 0.5 * (Sig + Sig.T)
        return Sig[6:, 6:], phi

    regions = jax.vmap(region_step, in_axes=(None, 0, None, 0, None, None))

    def run(controls, x0, means, covs, betas, P_preds, patches, patch_mask, alpha):
        def step(carry, inp):
            x, S = carry
            u, P_pred = inp
            x = x + u
            S, phi = regions(x, means, P_pred, S, patches, patch_mask)
            c = alpha * jnp.sum(u * u) + jnp.sum(betas * jnp.trace(S, axis1=1, axis2=2))
            return (x, S), (c, phi, S)

        (_, _), (cs, phis, Ss) = jax.lax.scan(step, (x0, covs), (controls, P_preds))
        c0 = jnp.sum(betas * jnp.trace(covs, axis1=1, axis2=2))
        return c0 + jnp.sum(cs), (phis, Ss)

    def cost(*args):
        return run(*args)[0]

    return (jax.jit(cost), jax.jit(jax.value_and_grad(cost)), jax.jit(run))


class PlanCost:
    """Cost of a control stack for fixed belief, weights and frontiers.

    Region and patch arrays are padded to fixed sizes so that one compiled
    function serves every replan of every episode.
    """

    def __init__(self, belief: BeliefState, start, betas, alpha, model: BeliefModel,
                 horizon: int, max_regions: int = 4, max_patches: int = 48):
        x0 = np.asarray(start.x if isinstance(start, RobotState) else start, float)
        m = belief.n_regions
        if m > max_regions:
            raise ValueError(f"{m} regions exceed the padded size {max_regions}")
        means = np.tile(x0[:3] + np.array([0.0, 0.0, 1.0]), (max_regions, 1))
        covs = np.zeros((max_regions, 3, 3))
        b = np.zeros(max_regions)
        means[:m], covs[:m], b[:m] = belief.means, belief.covs, betas
        patches = np.asarray(model.frontiers, float).reshape(-1, 4, 3)
        if len(patches) > max_patches:
            patches = patches[:max_patches]
        # padding: a unit square far below the table, masked out of the min
        pad = np.tile(np.array([[0.0, 0.0, -10.0], [1.0, 0.0, -10.0],
                                [1.0, 1.0, -10.0], [0.0, 1.0, -10.0]]), (max_patches, 1, 1))
        pad[:len(patches)] = patches
        mask = np.arange(max_patches) < len(patches)
        # the robot block evolves independently of the controls
        P = belief.robot_cov
        P_preds = []
        for _ in range(horizon):
            P_pred, P = robot_step(P, model)
            P_preds.append(P_pred)
        self.n_regions = m
        self.horizon = horizon
        self.x0 = x0
        self.args = (jnp.asarray(x0), jnp.asarray(means), jnp.asarray(covs), jnp.asarray(b),
                     jnp.asarray(np.array(P_preds)), jnp.asarray(pad), jnp.asarray(mask),
                     float(alpha))
        self._cost, self._vg, self._run = _compiled(_constants(model))

    def _check(self, controls):
        u = np.asarray(controls, float)
        if u.shape != (self.horizon, ROBOT_DIM):
            raise ValueError(f"controls must be ({self.horizon}, 6), got {u.shape}")
        return jnp.asarray(u)

    def __call__(self, controls) -> float:
        return float(self._cost(self._check(controls), *self.args))

    def value_and_grad(self, controls):
        v, g = self._vg(self._check(controls), *self.args)
        return float(v), np.asarray(g)

    def details(self, controls):
        """Per-step observability factors (T, M) and region covariances (T, M, 3, 3)."""
        _, (phis, Ss) = self._run(self._check(controls), *self.args)
        m = self.n_regions
        return np.asarray(phis)[:, :m], np.asarray(Ss)[:, :m]


def numpy_plan_cost(belief: BeliefState, start, controls, betas, alpha,
                    model: BeliefModel) -> float:
    """Reference cost through ``belief.propagate_horizon`` (finite-difference Jacobians)."""
    from .belief import propagate_horizon
    states = rollout(start, controls)[1:]
    traj = propagate_horizon(belief, states, model)
    u = np.asarray(controls, float)
    effort = alpha * float(np.sum(u * u))
    return effort + float(sum(np.asarray(betas) @ b.traces() for b in traj))


# --- optimizer ---------------------------------------------------------------

@dataclass
class PlanResult:
    controls: np.ndarray
    cost: float
    init_cost: float
    iterations: int
    converged: bool
    states: np.ndarray
    betas: np.ndarray
    history: list = field(default_factory=list)


def optimize_trajectory(belief: BeliefState, grid: world.VoxelGrid, weights: CostWeights,
                        init_controls, T: Optional[int] = None, *, start,
                        model: Optional[BeliefModel] = None,
                        config: PlannerConfig = PlannerConfig(), replan_index: int = 0,
                        frontier_boxes=None) -> PlanResult:
    """Projected gradient descent with backtracking over the control stack.

    The seed is projected first; a step is accepted only if it strictly lowers
    the cost, so the result never costs more than the projected seed (which is
    the seed itself whenever the seed is feasible).  When the iteration cap is
    hit the best plan so far is returned with ``converged=False``.
    """
    init = np.asarray(init_controls, float)
    T = init.shape[0] if T is None else T
    if init.shape != (T, ROBOT_DIM):
        raise ValueError(f"init controls must be ({T}, 6), got {init.shape}")
    if frontier_boxes is None:
        frontier_boxes = world.extract_frontier_boxes(grid)
    if model is None:
        model = BeliefModel()
    model = model.with_frontiers(world.frontier_patches(frontier_boxes))
    feasible = Feasible.from_grid(grid, config.workspace_margin, frontier_boxes,
                                  config.frontier_inflation)
    x0 = start.x if isinstance(start, RobotState) else np.asarray(start, float)
    betas = region_betas(belief.n_regions, weights, replan_index, config.uniform_beta)
    cost = PlanCost(belief, x0, betas, weights.alpha, model, T, config.max_regions,
                    config.max_patches)

    init_cost = cost(init)
    u = project_controls(init, x0, feasible, config.limits)
    f = cost(u)
    history = [f]
    step = config.init_step
    converged = False
    it = 0
    while it < config.max_iter:
        it += 1
        f, g = cost.value_and_grad(u)
        gmax = np.max(np.abs(g))
        if not np.isfinite(gmax) or gmax == 0.0:
            converged = True
            break
        direction = g / gmax
        accepted = False
        while step >= config.min_step:
            cand = project_controls(u - step * direction, x0, feasible, config.limits)
            fc = cost(cand)
            if fc < f - config.ftol * max(abs(f), 1e-12):
                accepted = True
                break
            step *= 0.5
        if not accepted:
            converged = True
            break
        moved = np.max(np.abs(cand - u))
        u, f = cand, fc
        history.append(f)
        step = min(step * 1.5, config.max_step)
        if moved < 1e-10:
            converged = True
            break
    return PlanResult(u, float(f), float(init_cost), it, converged, rollout(x0, u), betas,
                      history)


# --- termination --------------------------------------------------------------

def termination_decision(trace1, fraction, cfg: TerminationConfig = TerminationConfig()):
    """Strict-inequality halting rule on region-1 trace and vicinity coverage."""
    if trace1 is not None and trace1 < cfg.rho_sigma:
        return True, TerminationReason.TRACE_BELOW
    if fraction is not None and fraction > cfg.rho_upsilon:
        return True, TerminationReason.VICINITY_VISIBLE
    return False, TerminationReason.NONE


def should_terminate(belief: Optional[BeliefState], grid: world.VoxelGrid, p,
                     cfg: TerminationConfig = TerminationConfig()):
    """Whether exploration can stop, and why."""
    trace1 = None
    if belief is not None and belief.n_regions > 0:
        trace1 = float(np.trace(belief.covs[0]))
    fraction = world.visible_fraction(grid, p, cfg.vicinity)
    return termination_decision(trace1, fraction, cfg)


# --- trace log ---------------------------------------------------------------

def trace_record(replan_index: int, result: PlanResult, trace1, fraction) -> dict:
    return {
        "replan": int(replan_index),
        "iteration": int(result.iterations),
        "converged": bool(result.converged),
        "cost": float(result.cost),
        "init_cost": float(result.init_cost),
        "beta1": float(result.betas[0]) if len(result.betas) else None,
        "trace1": None if trace1 is None else float(trace1),
        "visible_fraction": None if fraction is None else float(fraction),
    }


def write_trace(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_trace(path) -> list:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
