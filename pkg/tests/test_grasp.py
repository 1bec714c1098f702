import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chisquare

from rfsearch.errors import InvalidAffordance, RfOutOfWorkspace, ShapeError
from rfsearch.grasp import heightmap as hmap
from rfsearch.grasp import learning, qnet
from rfsearch.grasp.learning import ReplayBuffer, Transition
from rfsearch.grasp.policy import (GraspState, apply_kernel, best_index, blocked_mask,
                                   epsilon_schedule, select_action)
from rfsearch.sim.physics import GraspOutcome, OutcomeKind
from rfsearch.world import ObjectKind, Scene, SceneObject


def cube(i, x, y, s=0.04, h=0.04, z0=0.0, **kw):
    return SceneObject(i, kw.pop("kind", ObjectKind.BLOCK), [x, y, z0], [x + s, y + s, z0 + h], **kw)


# --- heightmaps -------------------------------------------------------------

def test_empty_table_depth_zero():
    hm = hmap.render_heightmaps(Scene())
    assert hm.shape == (160, 240)
    assert np.all(hm.depth == 0)


def test_cube_plateau():
    hm = hmap.render_heightmaps(Scene([cube(0, 0.2, 0.3)]))
    top = hm.depth == 0.04
    assert top.sum() == 64
    ii, jj = np.nonzero(top)
    assert ii.max() - ii.min() == 7 and jj.max() - jj.min() == 7
    assert np.all(hm.depth[~top] == 0)


def test_cover_hides_cube():
    scene = Scene([cube(0, 0.2, 0.3, rgb=(1, 0, 0)),
                   cube(1, 0.19, 0.29, s=0.06, h=0.01, z0=0.04, kind=ObjectKind.COVER,
                        rgb=(0, 0, 1))])
    hm = hmap.render_heightmaps(scene)
    i, j = hm.cell_of([0.22, 0.32])
    assert hm.depth[i, j] == pytest.approx(0.05)
    np.testing.assert_array_equal(hm.rgb[i, j], [0, 0, 1])


def test_crop_examples():
    full = hmap.render_heightmaps(Scene([cube(0, 0.38, 0.58)]))
    c = hmap.crop_around_rfid(full, [0.4, 0.6, 0.02])
    assert c.shape == (22, 22)
    assert c.depth[11, 11] == 0.04
    corner = hmap.crop_around_rfid(full, [0.001, 0.001, 0.0])
    assert np.all(corner.depth[:11, :11] == 0) and np.all(corner.rgb[:11, :11] == 0)
    whole = hmap.crop_around_rfid(full, [0.4, 0.6, 0.0], crop_m=0.8)
    assert whole.shape == (160, 160)
    with pytest.raises(RfOutOfWorkspace):
        hmap.crop_around_rfid(full, [2.0, 0.0, 0.0])


def test_crop_full_workspace_is_identity():
    ws = hmap.Workspace([0, 0], [0.2, 0.2])
    full = hmap.render_heightmaps(Scene([cube(0, 0.05, 0.07)]), ws)
    c = hmap.crop_around_rfid(full, [0.1, 0.1, 0.0], 0.2, ws)
    np.testing.assert_array_equal(c.depth, full.depth)


def test_kernel_values():
    crop = hmap.Heightmaps(np.zeros((22, 22, 3)), np.zeros((22, 22)), origin=[0.0, 0.0])
    p = crop.cell_center(11, 11)
    k = hmap.rf_kernel([p[0], p[1], 0.0], 0.01, crop)
    assert k.center == (11, 11) and k.std_cells == 2.0
    assert k.values[11, 11] == 1.0
    assert k.values[13, 11] == pytest.approx(math.exp(-0.5), abs=1e-12)
    assert k.values[13, 11] == pytest.approx(0.6065, abs=1e-4)
    np.testing.assert_allclose(k.values, k.values.T)
    flat = hmap.rf_kernel([p[0], p[1], 0.0], float("inf"), crop)
    assert np.all(flat.values == 1.0)
    with pytest.raises(ValueError):
        hmap.rf_kernel(p, 0.0, crop)


# --- Q-network ----------------------------------------------------------------

def random_state(rng, n=12):
    return rng.uniform(0, 1, (n, n, 3)), rng.uniform(0, 0.08, (n, n))


def test_zero_params_give_zero_maps():
    rgb, d = random_state(np.random.default_rng(0))
    q = qnet.q_forward(rgb, d, qnet.QFunctionParams.zeros())
    assert q.shape == (16, 12, 12)
    assert np.all(q == 0)


def test_params_change_maps():
    rgb, d = random_state(np.random.default_rng(0))
    a = qnet.q_forward(rgb, d, qnet.QFunctionParams.init(np.random.default_rng(1)))
    b = qnet.q_forward(rgb, d, qnet.QFunctionParams.init(np.random.default_rng(2)))
    assert np.abs(a - b).max() > 0


def test_quarter_turn_equivariance():
    rng = np.random.default_rng(3)
    rgb, d = random_state(rng, 14)
    params = qnet.QFunctionParams.init(rng)
    q = qnet.q_forward(rgb, d, params)
    q_rot = qnet.q_forward(np.rot90(rgb, 1, axes=(0, 1)), np.rot90(d, 1), params)
    for k in range(16):
        np.testing.assert_allclose(q_rot[(k + 4) % 16], np.rot90(q[k], 1), atol=1e-3)


def test_state_shape_checked():
    with pytest.raises(ShapeError):
        qnet.q_forward(np.zeros((5, 5, 3)), np.zeros((4, 4)), qnet.QFunctionParams.zeros())


def test_rotation_adjoint():
    rng = np.random.default_rng(4)
    x, y = rng.normal(size=(9, 9)), rng.normal(size=(9, 9))
    a = 0.7
    assert np.sum(qnet.rotate(x, a) * y) == pytest.approx(np.sum(x * qnet.rotate_adjoint(y, a)))


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    eps = 1e-4
    for trial in range(10):
        rgb, d = random_state(rng, 10)
        params = qnet.QFunctionParams.init(rng)
        k, cell = int(rng.integers(16)), (int(rng.integers(10)), int(rng.integers(10)))
        _, grads = qnet.q_value_and_grad(rgb, d, params, k, cell)
        g = qnet.flatten_grads(grads)
        w = params.flat()
        coords = rng.choice(w.size, 40, replace=False)
        coords = np.union1d(coords, np.flatnonzero(np.abs(g) > 1e-3 * np.abs(g).max())[:40])
        fd = np.empty(coords.size)
        for n, c in enumerate(coords):
            e = np.zeros_like(w)
            e[c] = eps
            qp = qnet.q_forward(rgb, d, params.with_flat(w + e), [k])[0][cell]
            qm = qnet.q_forward(rgb, d, params.with_flat(w - e), [k])[0][cell]
            fd[n] = (qp - qm) / (2 * eps)
        err = np.linalg.norm(g[coords] - fd) / max(np.linalg.norm(fd), 1e-12)
        assert err < 1e-3, (trial, err)


# --- kernel application and selection ----------------------------------------

def test_uniform_kernel_keeps_argmax():
    rng = np.random.default_rng(6)
    maps = rng.normal(size=(16, 8, 8))
    crop = hmap.Heightmaps(np.zeros((8, 8, 3)), np.zeros((8, 8)))
    out = apply_kernel(maps, hmap.uniform_kernel(crop))
    np.testing.assert_array_equal(out, maps)
    assert best_index(out) == best_index(maps)
    with pytest.raises(ShapeError):
        apply_kernel(maps, np.ones((7, 8)))


@given(st.integers(0, 2 ** 31 - 1))
def test_kernel_support_restricts_choice(seed):
    rng = np.random.default_rng(seed)
    maps = rng.uniform(0.01, 1, size=(16, 10, 10))
    ii, jj = np.meshgrid(np.arange(10), np.arange(10), indexing="ij")
    disk = (ii - 4) ** 2 + (jj - 6) ** 2 <= 4
    k, (i, j) = best_index(apply_kernel(maps, disk.astype(float)))
    assert disk[i, j]


def test_peaked_kernel_breaks_tie_toward_center():
    maps = np.zeros((16, 9, 9))
    maps[0, 2, 4] = maps[0, 6, 4] = 1.0
    maps[0, 4, 4] = 0.5
    crop = hmap.Heightmaps(np.zeros((9, 9, 3)), np.zeros((9, 9)))
    p = crop.cell_center(5, 4)
    kern = hmap.rf_kernel([p[0], p[1], 0.0], 0.01, crop)
    assert best_index(maps) == (0, (2, 4))
    assert best_index(apply_kernel(maps, kern)) == (0, (6, 4))


def test_select_examples():
    crop = hmap.Heightmaps(np.zeros((6, 6, 3)), np.full((6, 6), 0.03))
    maps = np.zeros((16, 6, 6))
    assert best_index(maps) == (0, (0, 0))
    maps[7, 3, 5] = 2.0
    a = select_action(maps, crop)
    assert (a.k, a.cell) == (7, (3, 5))
    assert a.theta == qnet.rotation_angle(7)
    assert a.g[2] == 0.03
    np.testing.assert_allclose(a.g[:2], crop.cell_center(3, 5))
    with pytest.raises(InvalidAffordance):
        best_index(np.full((16, 6, 6), np.nan))
    blocked = np.zeros((16, 6, 6), bool)
    blocked[7, 3, 5] = True
    assert select_action(maps, crop, blocked=blocked).cell != (3, 5)


def test_blocked_mask_and_epsilon():
    crop = hmap.Heightmaps(np.zeros((6, 6, 3)), np.zeros((6, 6)))
    m = blocked_mask([(2, crop.cell_center(0, 0))], crop)
    assert m[2, :2, :2].all() and m.sum() == 4
    assert epsilon_schedule(0, 500) == 0.5
    assert epsilon_schedule(499, 500) == pytest.approx(0.1)


# --- reward ----------------------------------------------------------------------

def test_reward_examples():
    assert learning.reward(GraspOutcome(OutcomeKind.GRASPED_TARGET, 0.0)) == 1.0
    assert learning.reward(GraspOutcome(OutcomeKind.GRASPED_OTHER, 0.007)) == 1.0
    assert learning.reward(GraspOutcome(OutcomeKind.GRASPED_OTHER, 0.014)) == 0.5
    assert learning.reward(GraspOutcome(OutcomeKind.GRASPED_NOTHING)) == 0.0
    with pytest.raises(ValueError):
        learning.reward(GraspOutcome(OutcomeKind.GRASPED_OTHER, 0.0))


@given(st.floats(1e-6, 10.0))
def test_reward_bounds(d):
    r = learning.reward(GraspOutcome(OutcomeKind.GRASPED_OTHER, d))
    assert 0.0 <= r <= 1.0
    assert (r == 1.0) == (d <= learning.VARRHO)


# --- replay -------------------------------------------------------------------

def _entry(r):
    return Transition(None, 0, (0, 0), r, None, True)


def test_replay_threshold_values():
    assert learning.replay_threshold(0) == 0.05
    assert learning.replay_threshold(10) == pytest.approx(0.55)
    assert learning.replay_threshold(80) == pytest.approx(4.05)
    assert learning.replay_threshold(200) == pytest.approx(4.05)


def test_replay_fifo_and_fallback():
    buf = ReplayBuffer(capacity=3)
    for r in (0.1, 0.2, 0.3, 0.4):
        buf.push(_entry(r))
    assert len(buf) == 3 and [e.reward for e in buf.entries] == [0.2, 0.3, 0.4]
    idx, p, fallback = buf.probabilities(iteration=200)
    assert fallback and np.allclose(p, 1 / 3)
    assert len(buf.sample(2, np.random.default_rng(0), 200)) == 2 and buf.fallbacks == 1


def test_replay_rank_ratio():
    buf = ReplayBuffer()
    buf.push(_entry(0.5))
    buf.push(_entry(1.0))
    buf.push(_entry(0.01))   # below the threshold
    rng = np.random.default_rng(7)
    draws = [learning.replay_push_sample(buf, None, 1, 0, rng)[0].reward for _ in range(10_000)]
    counts = [draws.count(1.0), draws.count(0.5)]
    assert sum(counts) == 10_000
    assert chisquare(counts, [10_000 * 2 / 3, 10_000 / 3]).pvalue > 0.01
    # asking for more than eligible returns all eligible
    assert len(buf.sample(5, rng, 0)) == 2


# --- training ------------------------------------------------------------------

def _state(rng, n=10):
    rgb, d = random_state(rng, n)
    crop = hmap.Heightmaps(rgb, d)
    return GraspState(crop, hmap.uniform_kernel(crop))


def test_zero_error_step_only_decays():
    rng = np.random.default_rng(8)
    params = qnet.QFunctionParams.init(rng)
    s = _state(rng)
    q = qnet.q_forward(s.crop.rgb, s.crop.depth, params)[3, 2, 5]
    new, loss = learning.train_step([Transition(s, 3, (2, 5), q, None, True)], params)
    assert loss == 0.0
    np.testing.assert_allclose(new.flat(), params.flat() * (1 - params.lr * params.weight_decay),
                               rtol=0, atol=1e-15)


def test_loss_non_increasing_on_fixed_sample():
    rng = np.random.default_rng(9)
    params = qnet.QFunctionParams.init(rng)
    s = _state(rng)
    batch = [Transition(s, 5, (4, 4), 1.0, None, True)]
    losses = []
    for _ in range(50):
        params, loss = learning.train_step(batch, params)
        losses.append(loss)
    assert np.all(np.diff(losses) <= 1e-12)
    assert losses[-1] < losses[0]


def test_gradient_flows_only_through_executed_cell():
    rng = np.random.default_rng(10)
    params = qnet.QFunctionParams.init(rng)
    s = _state(rng)
    tr = Transition(s, 2, (3, 7), 0.3, None, True)
    loss, g = learning.loss_and_grad([tr], params)
    q, grads = qnet.q_value_and_grad(s.crop.rgb, s.crop.depth, params, 2, (3, 7))
    np.testing.assert_allclose(g, qnet.flatten_grads(grads) * np.clip(q - 0.3, -1, 1))
    # a target for a different cell of the same state gives a different gradient
    _, g2 = learning.loss_and_grad([Transition(s, 2, (4, 7), 0.3, None, True)], params)
    assert not np.allclose(g, g2)


def test_td_target_uses_discounted_max():
    rng = np.random.default_rng(11)
    params = qnet.QFunctionParams.init(rng)
    s, s2 = _state(rng), _state(rng)
    y = learning.td_targets([Transition(s, 0, (0, 0), 0.5, s2, False)], params)
    qmax = qnet.q_forward(s2.crop.rgb, s2.crop.depth, params).max()
    assert y[0] == pytest.approx(0.5 + 0.2 * qmax)


def test_diverged_training_raises():
    rng = np.random.default_rng(12)
    params = qnet.QFunctionParams.init(rng)
    s = _state(rng)
    from rfsearch.errors import DivergedTraining
    with pytest.raises(DivergedTraining):
        learning.train_step([Transition(s, 0, (0, 0), float("nan"), None, True)], params)


def test_training_is_deterministic():
    cfg = learning.TrainConfig(iterations=6, seed=3)
    a = learning.train_policy(cfg)
    b = learning.train_policy(cfg)
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())
    assert a.curve == b.curve


def test_checkpoint_round_trip(tmp_path):
    params = qnet.QFunctionParams.init(np.random.default_rng(13))
    path = learning.save_params(params, tmp_path / "p.bin", {"iteration": 5, "seed": 1})
    back = learning.load_params(path)
    np.testing.assert_allclose(back.flat(), params.flat(), rtol=1e-6, atol=1e-7)
    assert back.hyper == params.hyper
    learning.save_params(back, tmp_path / "q.bin", {"iteration": 5, "seed": 1})
    assert (tmp_path / "q.bin").read_bytes() == path.read_bytes()
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        learning.load_params(bad)


def test_learning_curve_csv(tmp_path):
    learning.write_learning_curve([(0, 0.5, 0.0), (1, 0.25, 1.0)], tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "iteration,loss,mean_reward" and lines[2] == "1,0.25,1"
