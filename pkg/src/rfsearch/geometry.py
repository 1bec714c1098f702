"""Camera and polytope geometry shared by the world model and the planner.

Functions that the planner differentiates take an ``xp`` argument so the same
code runs under ``numpy`` and ``jax.numpy``.  They avoid in-place updates.

Camera frame convention: +z is the optical axis, +x image right, +y image down.
A rotation matrix ``R`` maps camera-frame vectors to the world frame.
"""
import numpy as np
from scipy.spatial.transform import Rotation

_SMALL = 1e-12


def rotvec_to_matrix(r, xp=np):
    """Rodrigues formula, safe (and smooth) at the zero rotation."""
    theta2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2]
    small = theta2 < 1e-10
    safe2 = xp.where(small, 1.0, theta2)
    theta = xp.sqrt(safe2)
    a = xp.where(small, 1.0 - theta2 / 6.0, xp.sin(theta) / theta)
    b = xp.where(small, 0.5 - theta2 / 24.0, (1.0 - xp.cos(theta)) / safe2)
    K = xp.stack([
        xp.stack([0.0 * r[0], -r[2], r[1]]),
        xp.stack([r[2], 0.0 * r[0], -r[0]]),
        xp.stack([-r[1], r[0], 0.0 * r[0]]),
    ])
    return xp.eye(3) + a * K + b * (K @ K)


def matrix_to_rotvec(R):
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_rotvec()


def quat_to_matrix(q):
    """Unit quaternion in (x, y, z, w) order."""
    return Rotation.from_quat(np.asarray(q, dtype=float)).as_matrix()


def matrix_to_quat(R):
    return Rotation.from_matrix(np.asarray(R, dtype=float)).as_quat()


def look_at_matrix(position, target):
    """Rotation whose optical axis points from ``position`` to ``target``.

    Image-down is aligned with world -z where possible so views stay upright.
    """
    z = np.asarray(target, float) - np.asarray(position, float)
    n = np.linalg.norm(z)
    if n < _SMALL:
        return np.eye(3)
    z = z / n
    down = np.array([0.0, 0.0, -1.0])
    y = down - (down @ z) * z
    if np.linalg.norm(y) < 1e-6:
        # looking straight up or down: pick world +y as image-down
        y = np.array([0.0, 1.0, 0.0]) - z[1] * z
    y = y / np.linalg.norm(y)
    x = np.cross(y, z)
    return np.column_stack([x, y, z])


def frustum_planes(position, R, fov_h, fov_v, near, far, xp=np):
    """Half-spaces ``n . x - d >= 0`` (unit ``n``) bounding the view frustum.

    Returns ``(normals (6, 3), offsets (6,))`` in the world frame.
    """
    ch, sh = np.cos(fov_h / 2.0), np.sin(fov_h / 2.0)
    cv, sv = np.cos(fov_v / 2.0), np.sin(fov_v / 2.0)
    n_cam = np.array([
        [ch, 0.0, sh],
        [-ch, 0.0, sh],
        [0.0, cv, sv],
        [0.0, -cv, sv],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ])
    d_cam = np.array([0.0, 0.0, 0.0, 0.0, near, -far])
    normals = (R @ n_cam.T).T
    offsets = normals @ position + d_cam
    return normals, offsets


def convex_sd(x, normals, offsets, xp=np):
    """Positive-inside signed distance to an intersection of half-spaces.

    Exact inside the polytope; outside it is the largest face violation,
    which under-estimates the Euclidean distance near edges and corners.
    """
    return xp.min(normals @ x - offsets, axis=-1)


def box_faces(lo, hi):
    """The six faces of an axis-aligned box as (6, 4, 3) corner arrays."""
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    c = np.array([[lo[0] if i & 1 == 0 else hi[0],
                   lo[1] if i & 2 == 0 else hi[1],
                   lo[2] if i & 4 == 0 else hi[2]] for i in range(8)])
    quads = [(0, 2, 6, 4), (1, 3, 7, 5),   # x = lo, x = hi
             (0, 1, 5, 4), (2, 3, 7, 6),   # y = lo, y = hi
             (0, 1, 3, 2), (4, 5, 7, 6)]   # z = lo, z = hi
    return np.stack([c[list(q)] for q in quads])


def _unit(v, xp):
    return v / xp.sqrt(xp.sum(v * v, axis=-1, keepdims=True) + _SMALL)


def shadow_planes(camera, patches, xp=np):
    """Half-spaces of the volume hidden behind each planar quad patch.

    ``patches`` is (P, 4, 3).  For each patch the shadow is the pyramid
    frustum bounded by the patch plane and the four planes through the camera
    and each patch edge.  Returns ``normals (P, 5, 3)`` and ``offsets (P, 5)``
    with the shadow interior on the positive side.
    """
    v = patches
    centroid = xp.mean(v, axis=1)
    n_plane = _unit(xp.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), xp)
    # orient the patch normal away from the camera
    side = xp.sum(n_plane * (camera - v[:, 0]), axis=-1, keepdims=True)
    n_plane = xp.where(side > 0, -n_plane, n_plane)
    rel = v - camera
    edges = xp.cross(rel, xp.roll(rel, -1, axis=1))
    n_side = _unit(edges, xp)
    inward = xp.sum(n_side * (centroid - camera)[:, None, :], axis=-1, keepdims=True)
    n_side = xp.where(inward < 0, -n_side, n_side)
    normals = xp.concatenate([n_plane[:, None, :], n_side], axis=1)
    off_plane = xp.sum(n_plane * v[:, 0], axis=-1)
    off_side = xp.sum(n_side * camera, axis=-1)
    offsets = xp.concatenate([off_plane[:, None], off_side], axis=1)
    return normals, offsets


def visible_sd(x, position, R, fov_h, fov_v, near, far, patches=None,
               patch_mask=None, xp=np):
    """Signed distance from ``x`` to the camera's unoccluded view volume.

    The view volume is the frustum minus the shadows cast by ``patches``.
    Positive inside the visible volume, negative outside.
    """
    fn, fo = frustum_planes(position, R, fov_h, fov_v, near, far, xp=xp)
    sd = convex_sd(x, fn, fo, xp=xp)
    if patches is None or patches.shape[0] == 0:
        return sd
    sn, so = shadow_planes(position, patches, xp=xp)
    inside_shadow = xp.min(xp.einsum("pkj,j->pk", sn, x) - so, axis=-1)
    outside = -inside_shadow
    if patch_mask is not None:
        outside = xp.where(patch_mask, outside, 1e3)
    return xp.minimum(sd, xp.min(outside))


def distance_to_axis(x, position, R, xp=np):
    """Perpendicular distance from ``x`` to the camera's optical axis."""
    axis = R[:, 2]
    rel = x - position
    perp = rel - xp.sum(rel * axis) * axis
    return xp.sqrt(xp.sum(perp * perp) + _SMALL)


def segment_box_entry(start, ends, lo, hi):
    """Slab test of segments ``start -> ends[i]`` against boxes.

    ``ends`` is (N, 3); ``lo``/``hi`` are (K, 3).  Returns ``(t_enter,
    t_exit)`` arrays of shape (N, K) in segment-parameter units; a segment
    meets box k iff ``t_enter <= t_exit`` and the interval overlaps [0, 1].
    Arithmetic is written per component so results are reproducible by a
    scalar implementation.
    """
    start = np.asarray(start, float)
    ends = np.atleast_2d(np.asarray(ends, float))
    lo = np.atleast_2d(np.asarray(lo, float))
    hi = np.atleast_2d(np.asarray(hi, float))
    n, k = ends.shape[0], lo.shape[0]
    t0 = np.full((n, k), -np.inf)
    t1 = np.full((n, k), np.inf)
    for a in range(3):
        d = (ends[:, a] - start[a])[:, None]
        par = d == 0.0
        inside = (start[a] >= lo[None, :, a]) & (start[a] <= hi[None, :, a])
        with np.errstate(divide="ignore", invalid="ignore"):
            ta = (lo[None, :, a] - start[a]) / d
            tb = (hi[None, :, a] - start[a]) / d
        near_t = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(ta, tb))
        far_t = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(ta, tb))
        t0 = np.maximum(t0, near_t)
        t1 = np.minimum(t1, far_t)
    return t0, t1


def ray_box_hits(origin, dirs, lo, hi, t_min, t_max):
    """First hit distance and box index for rays ``origin + t * dirs``.

    Returns ``(t_hit (N,), index (N,))`` with ``index = -1`` for misses.
    """
    t0, t1 = segment_box_entry(origin, origin + dirs, lo, hi)
    t0 = np.maximum(t0, t_min)
    hit = (t0 <= t1) & (t0 <= t_max) & (t1 >= t_min)
    t = np.where(hit, t0, np.inf)
    if t.shape[1] == 0:
        return np.full(t.shape[0], np.inf), np.full(t.shape[0], -1)
    idx = np.argmin(t, axis=1)
    t_hit = t[np.arange(t.shape[0]), idx]
    idx = np.where(np.isfinite(t_hit), idx, -1)
    return t_hit, idx
