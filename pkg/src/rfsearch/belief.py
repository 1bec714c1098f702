"""EKF belief propagation over the robot pose and occluded-region Gaussians.

Regions are static, so their means never move; only covariances evolve.  Each
region is updated jointly with the robot pose in a 9-dimensional filter whose
measurement rows for the region are gated by the observability factor.
Robot/region and region/region cross terms are dropped after every step.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from . import geometry
from .errors import NearSingularInnovation, ShapeError

ROBOT_DIM = 6
REGION_DIM = 3
MAX_CONDITION = 1e12
JITTER = 1e-9


def _symmetrize(S):
    return 0.5 * (S + S.T)


@dataclass
class BeliefState:
    robot_cov: np.ndarray
    means: np.ndarray   # (M, 3)
    covs: np.ndarray    # (M, 3, 3)
    t: int = 0

    def __post_init__(self):
        self.robot_cov = np.asarray(self.robot_cov, float)
        self.means = np.asarray(self.means, float).reshape(-1, REGION_DIM)
        self.covs = np.asarray(self.covs, float).reshape(-1, REGION_DIM, REGION_DIM)
        if self.robot_cov.shape != (ROBOT_DIM, ROBOT_DIM):
            raise ShapeError(f"robot_cov must be 6x6, got {self.robot_cov.shape}")
        if len(self.means) != len(self.covs):
            raise ShapeError("one covariance per region mean")

    @classmethod
    def from_regions(cls, regions, robot_cov=None, t=0):
        if robot_cov is None:
            robot_cov = 1e-4 * np.eye(ROBOT_DIM)
        means = np.array([r.mean for r in regions]).reshape(-1, 3)
        covs = np.array([r.cov_seed for r in regions]).reshape(-1, 3, 3)
        return cls(robot_cov, means, covs, t)

    @property
    def n_regions(self) -> int:
        return len(self.means)

    def traces(self) -> np.ndarray:
        return np.trace(self.covs, axis1=1, axis2=2)

    def joint_cov(self) -> np.ndarray:
        """Block-diagonal covariance of robot pose and all regions."""
        n = ROBOT_DIM + REGION_DIM * self.n_regions
        S = np.zeros((n, n))
        S[:ROBOT_DIM, :ROBOT_DIM] = self.robot_cov
        for m, C in enumerate(self.covs):
            i = ROBOT_DIM + REGION_DIM * m
            S[i:i + 3, i:i + 3] = C
        return S

    def min_eigenvalue(self) -> float:
        vals = [np.linalg.eigvalsh(self.robot_cov).min()]
        vals += [np.linalg.eigvalsh(C).min() for C in self.covs]
        return float(min(vals))


@dataclass
class EkfMatrices:
    A: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    Delta: np.ndarray
    K: np.ndarray


@dataclass(frozen=True)
class ObservabilityParams:
    kappa: float = 50.0
    image_axis_weight: float = -0.1

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")


def observability(sd, rho_img, params: ObservabilityParams = ObservabilityParams()):
    """Sigmoid-smoothed visibility ``1 / (1 + exp(-kappa (sd + w rho)))``."""
    return expit(params.kappa * (sd + params.image_axis_weight * rho_img))


def _check_square(name, M, n=None):
    if M.ndim != 2 or M.shape[0] != M.shape[1] or (n is not None and M.shape[0] != n):
        raise ShapeError(f"{name} has shape {M.shape}")


def predict(Sigma, A, Q):
    """Covariance prediction ``A S A^T + Q Q^T``."""
    Sigma, A, Q = (np.atleast_2d(np.asarray(x, float)) for x in (Sigma, A, Q))
    _check_square("Sigma", Sigma)
    n = Sigma.shape[0]
    if A.shape != (n, n) or Q.shape[0] != n:
        raise ShapeError(f"A {A.shape} / Q {Q.shape} do not conform to Sigma {Sigma.shape}")
    return _symmetrize(A @ Sigma @ A.T + Q @ Q.T)


def gain(Sigma_pred, H, R, Delta):
    """Visibility-gated Kalman gain.

    ``K = S H^T D [D H S H^T D + R R^T]^-1 D``.  Raises
    ``NearSingularInnovation`` when the bracket's condition number exceeds 1e12.
    """
    S, H, R, D = (np.atleast_2d(np.asarray(x, float)) for x in (Sigma_pred, H, R, Delta))
    _check_square("Sigma", S)
    k = H.shape[0]
    if H.shape[1] != S.shape[0] or R.shape[0] != k or D.shape != (k, k):
        raise ShapeError(f"H {H.shape}, R {R.shape}, Delta {D.shape} vs Sigma {S.shape}")
    B = D @ H @ S @ H.T @ D + R @ R.T
    if np.linalg.cond(B) > MAX_CONDITION:
        raise NearSingularInnovation(f"innovation condition number {np.linalg.cond(B):.3g}")
    # K = S H^T D B^-1 D; B is symmetric so solve on the transposed system
    return np.linalg.solve(B, D @ H @ S).T @ D


def gain_with_jitter(Sigma_pred, H, R, Delta):
    """``gain`` retried once with ``1e-9 I`` added to the measurement noise."""
    try:
        return gain(Sigma_pred, H, R, Delta)
    except NearSingularInnovation:
        R = np.atleast_2d(np.asarray(R, float))
        C = R @ R.T + JITTER * np.eye(R.shape[0])
        return gain(Sigma_pred, H, np.linalg.cholesky(_symmetrize(C)), Delta)


def update(Sigma_pred, K, H):
    """Covariance correction ``(I - K H) S``."""
    S, K, H = (np.atleast_2d(np.asarray(x, float)) for x in (Sigma_pred, K, H))
    n = S.shape[0]
    if K.shape[0] != n or H.shape[1] != n or K.shape[1] != H.shape[0]:
        raise ShapeError(f"K {K.shape}, H {H.shape} vs Sigma {S.shape}")
    return _symmetrize((np.eye(n) - K @ H) @ S)


@dataclass(frozen=True)
class CameraIntrinsics:
    fov_h: float = 1.2
    fov_v: float = 0.9
    near: float = 0.05
    far: float = 1.2

    def as_dict(self):
        return dict(fov_h=self.fov_h, fov_v=self.fov_v, near=self.near, far=self.far)


@dataclass
class BeliefModel:
    """Sensor and motion noise used to propagate beliefs along a pose sequence."""

    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    obs: ObservabilityParams = field(default_factory=ObservabilityParams)
    frontiers: np.ndarray = field(default_factory=lambda: np.zeros((0, 4, 3)))
    dynamics_std: float = 0.005
    robot_meas_std: float = 0.005
    region_std0: float = 0.01
    region_std_per_m: float = 0.05
    fd_step: float = 1e-5

    def with_frontiers(self, frontiers) -> "BeliefModel":
        return replace(self, frontiers=np.asarray(frontiers, float).reshape(-1, 4, 3))

    def region_std(self, distance):
        return self.region_std0 + self.region_std_per_m * distance


def region_measurement(xr, xm):
    """Region mean expressed in the camera frame of robot state ``xr``."""
    R = geometry.rotvec_to_matrix(xr[3:])
    return R.T @ (xm - xr[:3])


def numerical_jacobian(f, x, step):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = step
        cols.append((f(x + e) - f(x - e)) / (2.0 * step))
    return np.stack(cols, axis=1)


def region_observability(xr, xm, model: BeliefModel):
    R = geometry.rotvec_to_matrix(np.asarray(xr[3:], float))
    cam = model.camera
    sd = geometry.visible_sd(xm, xr[:3], R, cam.fov_h, cam.fov_v, cam.near, cam.far,
                             model.frontiers)
    rho = geometry.distance_to_axis(xm, xr[:3], R)
    return float(observability(sd, rho, model.obs))


def step_matrices(xr, xm, robot_cov_pred, region_cov, model: BeliefModel) -> EkfMatrices:
    """Linearised joint (robot, region) filter matrices at one pose."""
    n = ROBOT_DIM + REGION_DIM

    def h(state):
        return np.concatenate([state[:ROBOT_DIM],
                               region_measurement(state[:ROBOT_DIM], state[ROBOT_DIM:])])

    def h_noise(r):
        z = h(np.concatenate([xr, xm]))
        d = np.linalg.norm(xm - xr[:3])
        scale = np.concatenate([np.full(ROBOT_DIM, model.robot_meas_std),
                                np.full(REGION_DIM, model.region_std(d))])
        return z + scale * r

    H = numerical_jacobian(h, np.concatenate([xr, xm]), model.fd_step)
    Rn = numerical_jacobian(h_noise, np.zeros(n), model.fd_step)
    phi = region_observability(xr, xm, model)
    Delta = np.diag(np.concatenate([np.ones(ROBOT_DIM), np.full(REGION_DIM, phi)]))
    S = np.zeros((n, n))
    S[:ROBOT_DIM, :ROBOT_DIM] = robot_cov_pred
    S[ROBOT_DIM:, ROBOT_DIM:] = region_cov
    K = gain_with_jitter(S, H, Rn, Delta)
    # region block is static: A = I and no process noise
    A = np.eye(n)
    Q = np.zeros((n, n))
    Q[:ROBOT_DIM, :ROBOT_DIM] = model.dynamics_std * np.eye(ROBOT_DIM)
    return EkfMatrices(A, Q, H, Rn, Delta, K)


def robot_step(robot_cov, model: BeliefModel):
    """Predict-and-correct of the robot block alone (direct pose measurement)."""
    A = np.eye(ROBOT_DIM)
    Q = model.dynamics_std * np.eye(ROBOT_DIM)
    P_pred = predict(robot_cov, A, Q)
    H = np.eye(ROBOT_DIM)
    R = model.robot_meas_std * np.eye(ROBOT_DIM)
    K = gain_with_jitter(P_pred, H, R, np.eye(ROBOT_DIM))
    return P_pred, update(P_pred, K, H)


def propagate_horizon(belief: BeliefState, pose_sequence, model: BeliefModel,
                      return_details: bool = False):
    """Belief trajectory along robot states ``pose_sequence`` (T x 6).

    Returns ``T + 1`` states, the first being ``belief``.  With
    ``return_details`` also returns the per-step observability factors (T, M).
    """
    poses = np.atleast_2d(np.asarray(pose_sequence, float))
    if poses.shape[0] < 1 or poses.shape[1] != ROBOT_DIM:
        raise ShapeError(f"pose sequence must be (T >= 1, 6), got {poses.shape}")
    out = [belief]
    phis = np.zeros((poses.shape[0], belief.n_regions))
    P = belief.robot_cov
    covs = belief.covs.copy()
    for t, xr in enumerate(poses):
        P_pred, P_next = robot_step(P, model)
        new_covs = np.empty_like(covs)
        for m in range(belief.n_regions):
            mats = step_matrices(xr, belief.means[m], P_pred, covs[m], model)
            n = ROBOT_DIM + REGION_DIM
            S = np.zeros((n, n))
            S[:ROBOT_DIM, :ROBOT_DIM] = P_pred
            S[ROBOT_DIM:, ROBOT_DIM:] = covs[m]
            S_next = update(S, mats.K, mats.H)
            new_covs[m] = S_next[ROBOT_DIM:, ROBOT_DIM:]
            phis[t, m] = mats.Delta[-1, -1]
        P, covs = P_next, new_covs
        out.append(BeliefState(P, belief.means, covs.copy(), belief.t + t + 1))
    if return_details:
        return out, phis
    return out
