"""Spatio-temporal reward, prioritized replay and Huber-loss Q-learning."""
from __future__ import annotations

import csv
import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from ..errors import DivergedTraining
from ..sim.physics import GraspOutcome, OutcomeKind, execute_grasp
from . import qnet
from .policy import GraspState, blocked_mask, epsilon_schedule, select_action

log = logging.getLogger(__name__)

VARRHO = 0.007
HUBER_DELTA = 1.0


# --- reward -------------------------------------------------------------------

def reward(outcome: GraspOutcome, varrho: float = VARRHO) -> float:
    """1 for the target, ``min(varrho / d, 1)`` for another object, else 0."""
    if outcome.kind is OutcomeKind.GRASPED_TARGET:
        return 1.0
    if outcome.kind is OutcomeKind.GRASPED_OTHER:
        if not outcome.d > 0:
            raise ValueError("GraspedOther needs a positive distance")
        return float(min(max(varrho / outcome.d, 0.0), 1.0))
    return 0.0


# --- replay -------------------------------------------------------------------

@dataclass
class Transition:
    state: GraspState
    k: int
    cell: tuple
    reward: float
    next_state: Optional[GraspState]
    done: bool


def replay_threshold(iteration: int) -> float:
    return 0.05 + min(0.05 * iteration, 4.0)


class ReplayBuffer:
    """FIFO buffer with rank-based sampling above a reward threshold."""

    def __init__(self, capacity: int = 2000, exponent: float = 1.0):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.exponent = exponent
        self.entries = deque(maxlen=capacity)
        self.iteration = 0
        self.fallbacks = 0

    def __len__(self):
        return len(self.entries)

    def push(self, entry: Transition):
        self.entries.append(entry)

    def eligible(self, iteration: Optional[int] = None) -> np.ndarray:
        it = self.iteration if iteration is None else iteration
        rho = replay_threshold(it)
        rewards = np.array([e.reward for e in self.entries])
        return np.flatnonzero(rewards >= rho)

    def probabilities(self, iteration: Optional[int] = None):
        """Indices and sampling probabilities; uniform when nothing is eligible."""
        idx = self.eligible(iteration)
        if idx.size == 0:
            n = len(self.entries)
            return np.arange(n), np.full(n, 1.0 / n) if n else np.zeros(0), True
        rewards = np.array([self.entries[i].reward for i in idx])
        order = idx[np.argsort(-rewards, kind="stable")]
        ranks = np.arange(1, order.size + 1, dtype=float)
        p = ranks ** -self.exponent
        return order, p / p.sum(), False

    def sample(self, batch_size: int, rng: np.random.Generator,
               iteration: Optional[int] = None) -> list:
        if len(self.entries) == 0:
            return []
        idx, p, fallback = self.probabilities(iteration)
        if fallback:
            self.fallbacks += 1
            log.debug("replay: no entry reaches %.3f, sampling uniformly",
                      replay_threshold(self.iteration if iteration is None else iteration))
        if not fallback and batch_size >= idx.size:
            return [self.entries[i] for i in idx]
        pick = rng.choice(idx.size, size=min(batch_size, idx.size), replace=False, p=p)
        return [self.entries[idx[i]] for i in pick]


def replay_push_sample(buffer: ReplayBuffer, entry: Optional[Transition] = None,
                       batch_size: int = 0, iteration: Optional[int] = None,
                       rng: Optional[np.random.Generator] = None) -> list:
    if entry is not None:
        buffer.push(entry)
    if batch_size <= 0:
        return []
    return buffer.sample(batch_size, rng or np.random.default_rng(0), iteration)


# --- training step ---------------------------------------------------------

def huber(e, delta=HUBER_DELTA):
    a = np.abs(e)
    return np.where(a <= delta, 0.5 * e * e, delta * (a - 0.5 * delta))


def huber_grad(e, delta=HUBER_DELTA):
    return np.clip(e, -delta, delta)


def td_targets(batch, params: qnet.QFunctionParams) -> np.ndarray:
    y = np.empty(len(batch))
    for n, tr in enumerate(batch):
        y[n] = tr.reward
        if not tr.done and tr.next_state is not None:
            q_next = qnet.q_forward(tr.next_state.crop.rgb, tr.next_state.crop.depth, params)
            y[n] += params.gamma * float(np.max(q_next))
    return y


def loss_and_grad(batch, params: qnet.QFunctionParams, targets=None):
    """Mean Huber TD loss and its gradient; only executed cells carry gradient."""
    y = td_targets(batch, params) if targets is None else np.asarray(targets, float)
    total = None
    losses = np.empty(len(batch))
    for n, tr in enumerate(batch):
        q, g = qnet.q_value_and_grad(tr.state.crop.rgb, tr.state.crop.depth, params, tr.k,
                                     tr.cell)
        e = q - y[n]
        losses[n] = huber(e)
        # dQ/dw is seeded with 1, so the chain rule is a plain rescale
        flat = qnet.flatten_grads(g) * (float(huber_grad(e)) / len(batch))
        total = flat if total is None else total + flat
    return float(losses.mean()), total


def train_step(batch, params: qnet.QFunctionParams, targets=None):
    """One SGD-with-momentum step; returns ``(new_params, mean_loss)``.

    The update follows the usual coupled form: ``v <- mu v + (g + wd w)``,
    ``w <- w - lr v``.
    """
    if not batch:
        raise ValueError("empty batch")
    loss, g = loss_and_grad(batch, params, targets)
    if not np.isfinite(loss) or not np.all(np.isfinite(g)):
        raise DivergedTraining(f"non-finite loss {loss}")
    w = params.flat()
    out = params.copy()
    v_old = np.concatenate([np.concatenate([params.velocity[n][0].ravel(), params.velocity[n][1]])
                            for n in qnet.LAYER_NAMES])
    v = params.momentum * v_old + g + params.weight_decay * w
    new = out.with_flat(w - params.lr * v)
    new.velocity = out.with_flat(v).weights
    new.step = params.step + 1
    return new, loss


# --- training loop --------------------------------------------------------

@dataclass
class TrainConfig:
    iterations: int = 500
    attempts_per_scene: int = 5
    replay_batch: int = 1
    replay_capacity: int = 2000
    eps_start: float = 0.5
    eps_end: float = 0.1
    crop_m: float = 0.11
    use_kernel_in_training: bool = False
    seed: int = 0


@dataclass
class TrainResult:
    params: qnet.QFunctionParams
    curve: list = field(default_factory=list)   # (iteration, loss, mean reward)
    seed: int = 0


def train_policy(config: TrainConfig = TrainConfig(), params=None, scene_config=None,
                 progress=None) -> TrainResult:
    """Self-supervised grasp training on generated clutter scenes.

    Every iteration executes one grasp, stores the transition, and takes one
    step on the new transition plus a prioritized replay sample.
    """
    from ..rfsense import localize
    from ..sim.scenario import generate_grasp_scene

    rng = np.random.default_rng(config.seed)
    params = params or qnet.QFunctionParams.init(np.random.default_rng(config.seed + 1))
    buffer = ReplayBuffer(config.replay_capacity)
    curve = []
    scene_id = 0
    scene, tag = generate_grasp_scene(config.seed * 100003 + scene_id, scene_config)
    attempts, failed, rewards = 0, [], []
    state = None
    for it in range(config.iterations):
        buffer.iteration = it
        if state is None:
            est = localize(tag, scene, rng, sigma=0.01)
            state = GraspState.build(scene, est.p, est.sigma if config.use_kernel_in_training
                                     else 0.0, config.crop_m)
        maps = qnet.q_forward(state.crop.rgb, state.crop.depth, params)
        eps = epsilon_schedule(it, config.iterations, config.eps_start, config.eps_end)
        action = select_action(maps, state.crop, rng, eps, blocked_mask(failed, state.crop))
        outcome = execute_grasp(scene, action, tag)
        r = reward(outcome)
        rewards.append(r)
        attempts += 1
        done = outcome.kind is OutcomeKind.GRASPED_TARGET or attempts >= config.attempts_per_scene
        if not outcome.grasped:
            failed.append((action.k, action.g))
        next_state = None
        if not done:
            est = localize(tag, scene, rng, sigma=0.01)
            next_state = GraspState.build(scene, est.p, 0.0, config.crop_m)
        tr = Transition(state, action.k, action.cell, r, next_state, done)
        batch = [tr] + replay_push_sample(buffer, None, config.replay_batch, it, rng)
        buffer.push(tr)
        try:
            params, loss = train_step(batch, params)
        except DivergedTraining as exc:
            raise DivergedTraining(str(exc), seed=config.seed) from exc
        curve.append((it, loss, float(np.mean(rewards[-50:]))))
        if progress is not None:
            progress(it, loss, r)
        if done:
            scene_id += 1
            scene, tag = generate_grasp_scene(config.seed * 100003 + scene_id, scene_config)
            attempts, failed, state = 0, [], None
        else:
            state = next_state
    return TrainResult(params, curve, config.seed)


@dataclass
class GraspEvaluation:
    successes: int
    attempts: int
    scenes: int

    @property
    def efficiency(self) -> float:
        return self.successes / self.attempts if self.attempts else 0.0


def evaluate_policy(policy, n_scenes: int = 100, first_seed: int = 10_000,
                    sigma: float = 0.01, attempts_per_scene: int = 10,
                    scene_config=None) -> GraspEvaluation:
    """Grasp-phase-only evaluation of a frozen policy on generated clutter.

    Scene ``i`` uses seed ``first_seed + i`` for both layout and RF noise, so
    different policies face the same scenes and the same RF fixes.  ``sigma``
    sets the kernel width handed to the policy; 0 gives a flat kernel.
    """
    from ..rfsense import localize
    from ..sim.scenario import generate_grasp_scene
    successes = attempts = 0
    for i in range(n_scenes):
        rng = np.random.default_rng(first_seed + i)
        scene, tag = generate_grasp_scene(first_seed + i, scene_config)
        failed = []
        for _ in range(attempts_per_scene):
            est = localize(tag, scene, rng, sigma=0.01)
            state = GraspState.build(scene, est.p, sigma)
            action = policy.act(state, rng, blocked_mask(failed, state.crop))
            outcome = execute_grasp(scene, action, tag)
            attempts += 1
            if outcome.kind is OutcomeKind.GRASPED_TARGET:
                successes += 1
                break
            if not outcome.grasped:
                failed.append((action.k, action.g))
    return GraspEvaluation(successes, attempts, n_scenes)


def write_learning_curve(curve, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "mean_reward"])
        for it, loss, r in curve:
            w.writerow([it, f"{loss:.9g}", f"{r:.9g}"])


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"RFQN"
CHECKPOINT_VERSION = 1


def save_params(params: qnet.QFunctionParams, path, meta: Optional[dict] = None):
    """Binary weights (magic, version, layer dims, little-endian float32) + JSON sidecar."""
    path = Path(path)
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(qnet.LAYERS))]
    for name, cin, cout, k, _ in qnet.LAYERS:
        parts.append(struct.pack("<III", cout, cin, k))
    for name in qnet.LAYER_NAMES:
        W, b = params.weights[name]
        parts.append(W.astype("<f4").tobytes())
        parts.append(b.astype("<f4").tobytes())
    path.write_bytes(b"".join(parts))
    info = {"format": "rf-qnet", "version": CHECKPOINT_VERSION, "dtype": "float32-le",
            "layers": [list(layer[:4]) for layer in qnet.LAYERS],
            "hyper": params.hyper, "step": params.step}
    info.update(meta or {})
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(info, indent=2, sort_keys=True))
    return path


def load_params(path) -> qnet.QFunctionParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic {raw[:4]!r}")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION or n != len(qnet.LAYERS):
        raise ValueError(f"unsupported checkpoint version {version} with {n} layers")
    off = 12
    dims = []
    for _ in range(n):
        dims.append(struct.unpack_from("<III", raw, off))
        off += 12
    weights = {}
    for (name, cin, cout, k, _), (c_out, c_in, kk) in zip(qnet.LAYERS, dims):
        if (c_out, c_in, kk) != (cout, cin, k):
            raise ValueError(f"layer {name} dims {(c_out, c_in, kk)} do not match")
        nw = cout * cin * k * k
        W = np.frombuffer(raw, "<f4", nw, off).astype(float).reshape(cout, cin, k, k)
        off += 4 * nw
        b = np.frombuffer(raw, "<f4", cout, off).astype(float)
        off += 4 * cout
        weights[name] = (W, b)
    hyper = {}
    sidecar = Path(path).with_suffix(Path(path).suffix + ".json")
    if sidecar.exists():
        hyper = json.loads(sidecar.read_text()).get("hyper", {})
    return qnet.QFunctionParams(weights, **hyper)
