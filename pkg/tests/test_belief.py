import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rfsearch import belief, geometry
from rfsearch.belief import BeliefModel, BeliefState, ObservabilityParams
from rfsearch.errors import NearSingularInnovation, ShapeError


def test_observability_examples():
    assert belief.observability(0.0, 0.0) == 0.5
    assert belief.observability(10 / 50, 0.0) > 0.9999
    p = ObservabilityParams(kappa=1.0)
    assert belief.observability(1.0, 0.0, p) == pytest.approx(1 / (1 + math.exp(-1)), abs=1e-15)
    with pytest.raises(ValueError):
        ObservabilityParams(kappa=0.0)


@given(st.floats(-0.5, 0.5), st.floats(1e-4, 0.1))
def test_observability_increasing_in_sd(sd, step):
    assert belief.observability(sd + step, 0.02) > belief.observability(sd, 0.02)


def test_predict_examples():
    S = np.diag([1.0, 2.0, 3.0])
    np.testing.assert_array_equal(belief.predict(S, np.eye(3), np.zeros((3, 3))), S)
    assert belief.predict([[2.0]], [[3.0]], [[1.0]])[0, 0] == 19.0
    with pytest.raises(ShapeError):
        belief.predict(S, np.eye(2), np.zeros((3, 3)))


def test_gain_and_update_examples():
    assert belief.gain([[1.0]], [[1.0]], [[1.0]], [[1.0]])[0, 0] == 0.5
    assert belief.gain([[1.0]], [[1.0]], [[1e-6]], [[1.0]])[0, 0] == pytest.approx(1.0, abs=1e-9)
    K0 = belief.gain(np.eye(3), np.eye(3), np.eye(3), np.zeros((3, 3)))
    np.testing.assert_array_equal(K0, 0)
    assert belief.update([[1.0]], [[0.5]], [[1.0]])[0, 0] == 0.5
    S = np.array([[2.0, 0.3], [0.3, 1.0]])
    np.testing.assert_array_equal(belief.update(S, np.zeros((2, 2)), np.eye(2)), S)
    H = np.array([[2.0, 1.0], [0.0, 1.0]])
    np.testing.assert_allclose(belief.update(S, np.linalg.inv(H), H), 0, atol=1e-15)


def test_near_singular_and_jitter():
    with pytest.raises(NearSingularInnovation):
        belief.gain([[1.0]], [[1.0]], [[0.0]], [[0.0]])
    K = belief.gain_with_jitter([[1.0]], [[1.0]], [[0.0]], [[0.0]])
    assert K[0, 0] == 0.0


def scalar_kalman(P, a, q, r, h=1.0):
    """Textbook scalar predict + update."""
    P = a * P * a + q * q
    k = P * h / (h * P * h + r * r)
    return (1 - k * h) * P


def test_scalar_end_to_end():
    P = np.array([[1.0]])
    seq = []
    for _ in range(2):
        K = belief.gain(P, [[1.0]], [[1.0]], [[1.0]])
        P = belief.update(P, K, [[1.0]])
        seq.append(P[0, 0])
    assert seq[0] == 0.5
    assert abs(seq[1] - 1 / 3) < 1e-12


def test_scalar_oracle_random_steps():
    rng = np.random.default_rng(3)
    P_ref = P = 1.0
    for _ in range(100):
        a, q, r, h = rng.uniform(0.5, 1.5), rng.uniform(0, 0.5), rng.uniform(0.1, 2), rng.uniform(0.5, 2)
        P_ref = scalar_kalman(P_ref, a, q, r, h)
        Pm = belief.predict([[P]], [[a]], [[q]])
        K = belief.gain(Pm, [[h]], [[r]], [[1.0]])
        P = belief.update(Pm, K, [[h]])[0, 0]
        assert abs(P - P_ref) <= 1e-12 * max(1.0, abs(P_ref))


def _random_belief(rng, M):
    covs = []
    for _ in range(M):
        L = rng.normal(size=(3, 3)) * 0.05
        covs.append(L @ L.T + 1e-6 * np.eye(3))
    means = rng.uniform([0.2, 0.2, 0.0], [0.6, 1.0, 0.2], size=(M, 3))
    return BeliefState(1e-4 * np.eye(6), means, np.array(covs))


@given(st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_propagation_keeps_psd_and_never_gains_trace(M, seed):
    rng = np.random.default_rng(seed)
    b = _random_belief(rng, M)
    start = b.means.mean(axis=0) + [0.0, -0.4, 0.3]
    poses = np.concatenate([start + rng.normal(0, 0.05, (3, 3)),
                            rng.normal(0, 0.5, (3, 3))], axis=1)
    traj = belief.propagate_horizon(b, poses, BeliefModel())
    for prev, s in zip(traj, traj[1:]):
        assert s.min_eigenvalue() >= -1e-9
        np.testing.assert_allclose(s.covs, np.transpose(s.covs, (0, 2, 1)), atol=1e-9)
        assert np.all(s.traces() <= prev.traces() + 1e-9)


def _staring_pose(target, offset=(0.0, -0.4, 0.2)):
    pos = np.asarray(target) + offset
    return np.concatenate([pos, geometry.matrix_to_rotvec(geometry.look_at_matrix(pos, target))])


def test_unseen_region_trace_constant():
    b = _random_belief(np.random.default_rng(1), 1)
    pose = _staring_pose(b.means[0])
    pose[3:] = geometry.matrix_to_rotvec(geometry.look_at_matrix(pose[:3], pose[:3] - [0, 1, 0]))
    traj, phi = belief.propagate_horizon(b, np.repeat(pose[None], 5, 0), BeliefModel(), True)
    assert phi.max() < 1e-6
    tr = [s.traces()[0] for s in traj]
    assert max(tr) - min(tr) < 1e-6


def test_staring_low_noise_trace_decreases():
    b = _random_belief(np.random.default_rng(2), 1)
    model = BeliefModel(region_std0=1e-3, region_std_per_m=0.0)
    pose = _staring_pose(b.means[0])
    traj, phi = belief.propagate_horizon(b, np.repeat(pose[None], 5, 0), model, True)
    assert phi.min() > 0.99
    tr = np.array([s.traces()[0] for s in traj])
    assert np.all(np.diff(tr) < 0)


def test_delta_is_diagonal_in_unit_interval():
    b = _random_belief(np.random.default_rng(4), 1)
    pose = _staring_pose(b.means[0])
    P_pred, _ = belief.robot_step(b.robot_cov, BeliefModel())
    m = belief.step_matrices(pose, b.means[0], P_pred, b.covs[0], BeliefModel())
    D = m.Delta
    np.testing.assert_array_equal(D, np.diag(np.diag(D)))
    assert np.all((np.diag(D) >= 0) & (np.diag(D) <= 1))
    assert m.H.shape == (9, 9) and m.K.shape == (9, 9)


def test_delta_continuity_matches_sigmoid_derivative():
    """d phi / d pose by finite differences equals kappa phi (1 - phi) times the
    derivative of the smooth argument, relative error < 1e-3."""
    model = BeliefModel()
    xm = np.array([0.4, 0.6, 0.05])
    rng = np.random.default_rng(8)
    eps = 1e-5
    checked = 0
    for _ in range(20):
        xr = _staring_pose(xm, offset=rng.uniform([-0.1, -0.5, 0.15], [0.1, -0.3, 0.3]))
        xr[3:] += rng.normal(0, 0.3, 3)  # target somewhere near the frustum boundary

        def arg(x):
            R = geometry.rotvec_to_matrix(x[3:])
            c = model.camera
            sd = geometry.visible_sd(xm, x[:3], R, c.fov_h, c.fov_v, c.near, c.far)
            return sd + model.obs.image_axis_weight * geometry.distance_to_axis(xm, x[:3], R)

        phi = belief.region_observability(xr, xm, model)
        if not 1e-3 < phi < 1 - 1e-3:
            continue
        for i in range(6):
            e = np.zeros(6)
            e[i] = eps
            fd = (belief.region_observability(xr + e, xm, model)
                  - belief.region_observability(xr - e, xm, model)) / (2 * eps)
            darg = (arg(xr + e) - arg(xr - e)) / (2 * eps)
            analytic = model.obs.kappa * phi * (1 - phi) * darg
            if abs(analytic) > 1e-6:
                assert abs(fd - analytic) <= 1e-3 * abs(analytic)
                checked += 1
    assert checked > 10


@given(st.floats(-0.1, 0.1), st.floats(-0.1, 0.1), st.floats(-0.1, 0.1))
def test_delta_lipschitz_in_position(dx, dy, dz):
    model = BeliefModel()
    xm = np.array([0.4, 0.6, 0.05])
    xr = _staring_pose(xm)
    d = np.array([dx, dy, dz, 0, 0, 0]) * 1e-3
    eps = np.linalg.norm(d)
    change = abs(belief.region_observability(xr + d, xm, model)
                 - belief.region_observability(xr, xm, model))
    # sd and rho are 1-Lipschitz in the camera position, sigmoid slope <= kappa / 4
    bound = model.obs.kappa / 4 * (1 + abs(model.obs.image_axis_weight)) * eps
    assert change <= bound * (1 + 1e-6) + 1e-15


def test_belief_state_shapes():
    with pytest.raises(ShapeError):
        BeliefState(np.eye(5), np.zeros((1, 3)), np.zeros((1, 3, 3)))
    with pytest.raises(ShapeError):
        BeliefState(np.eye(6), np.zeros((2, 3)), np.zeros((1, 3, 3)))
    b = _random_belief(np.random.default_rng(0), 2)
    assert b.joint_cov().shape == (12, 12)
