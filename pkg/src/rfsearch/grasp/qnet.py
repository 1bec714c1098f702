"""Two-stream convolutional Q-function with hand-written backpropagation.

Each of the 16 rotations is handled by rotating the input crop, running the
same network, and rotating the single-channel output back.  Rotations use a
bilinear resampling operator stored as explicit (index, weight) pairs so its
adjoint is exact.

Layout: colour stream (3 -> 8 -> 16, 3x3 convs, ReLU), depth stream
(1 -> 8 -> 16, 3x3 convs, ReLU), channel concat, 1x1 conv 32 -> 16 + ReLU,
1x1 conv 16 -> 1.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError

N_ROTATIONS = 16
DEPTH_SCALE = 0.05  # depth is fed to the network in units of 5 cm

# name, in channels, out channels, kernel size, relu after
LAYERS = (
    ("color1", 3, 8, 3, True),
    ("color2", 8, 16, 3, True),
    ("depth1", 1, 8, 3, True),
    ("depth2", 8, 16, 3, True),
    ("head1", 32, 16, 1, True),
    ("head2", 16, 1, 1, False),
)
LAYER_NAMES = tuple(layer[0] for layer in LAYERS)


def rotation_angle(k: int) -> float:
    return 2.0 * np.pi * k / N_ROTATIONS


# --- rotation resampling ------------------------------------------------------

@functools.lru_cache(maxsize=256)
def rotation_operator(shape, angle):
    """Bilinear sampling of an image rotated counter-clockwise by ``angle``.

    Output cell ``q`` reads the input at ``R(-angle) (q - c) + c`` with ``c`` the
    array center.  Returns source indices and weights, both (4, H*W); samples
    outside the array carry zero weight.
    """
    H, W = shape
    ci, cj = (H - 1) / 2.0, (W - 1) / 2.0
    ii, jj = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    c, s = np.cos(angle), np.sin(angle)
    di, dj = ii - ci, jj - cj
    si = c * di + s * dj + ci
    sj = -s * di + c * dj + cj
    # snap values that are integers up to round-off so 90 degree turns are exact
    si = np.where(np.abs(si - np.round(si)) < 1e-9, np.round(si), si).ravel()
    sj = np.where(np.abs(sj - np.round(sj)) < 1e-9, np.round(sj), sj).ravel()
    i0, j0 = np.floor(si), np.floor(sj)
    fi, fj = si - i0, sj - j0
    idx, wts = [], []
    for oi, oj, w in ((0, 0, (1 - fi) * (1 - fj)), (1, 0, fi * (1 - fj)),
                      (0, 1, (1 - fi) * fj), (1, 1, fi * fj)):
        a, b = i0 + oi, j0 + oj
        ok = (a >= 0) & (a < H) & (b >= 0) & (b < W)
        idx.append(np.where(ok, a * W + b, 0).astype(np.int64))
        wts.append(np.where(ok, w, 0.0))
    idx, wts = np.array(idx), np.array(wts)
    idx.setflags(write=False)
    wts.setflags(write=False)
    return idx, wts


def rotate(img, angle):
    """Rotate the trailing two axes of ``img`` counter-clockwise by ``angle``."""
    img = np.asarray(img, float)
    shape = img.shape[-2:]
    idx, wts = rotation_operator(shape, float(angle))
    flat = img.reshape(img.shape[:-2] + (-1,))
    out = (flat[..., idx] * wts).sum(axis=-2)
    return out.reshape(img.shape)


def rotate_adjoint(grad, angle):
    """Transpose of ``rotate`` applied to ``grad``."""
    grad = np.asarray(grad, float)
    shape = grad.shape[-2:]
    n = shape[0] * shape[1]
    idx, wts = rotation_operator(shape, float(angle))
    flat = grad.reshape(-1, n)
    out = np.zeros_like(flat)
    for k in range(4):
        for r in range(flat.shape[0]):
            out[r] += np.bincount(idx[k], weights=wts[k] * flat[r], minlength=n)
    return out.reshape(grad.shape)


# --- convolution primitives -----------------------------------------------

def _im2col(x, k):
    """``x`` (B, C, H, W) -> columns (B*H*W, C*k*k) for a same-padded conv."""
    B, C, H, W = x.shape
    if k == 1:
        return x.transpose(0, 2, 3, 1).reshape(B * H * W, C)
    p = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    win = sliding_window_view(xp, (k, k), axis=(2, 3))  # B, C, H, W, k, k
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * k * k)


def _col2im(cols, shape, k):
    B, C, H, W = shape
    if k == 1:
        return cols.reshape(B, H, W, C).transpose(0, 3, 1, 2)
    p = k // 2
    c = cols.reshape(B, H, W, C, k, k)
    out = np.zeros((B, C, H + 2 * p, W + 2 * p))
    for a in range(k):
        for b in range(k):
            out[:, :, a:a + H, b:b + W] += c[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return out[:, :, p:p + H, p:p + W]


def conv_forward(x, Wt, b):
    B, C, H, Wd = x.shape
    cout, cin, k, _ = Wt.shape
    if cin != C:
        raise ShapeError(f"conv expects {cin} channels, got {C}")
    cols = _im2col(x, k)
    out = cols @ Wt.reshape(cout, -1).T + b
    return out.reshape(B, H, Wd, cout).transpose(0, 3, 1, 2), cols


def conv_backward(dout, cols, x_shape, Wt):
    B, cout, H, W = dout.shape
    k = Wt.shape[2]
    d = dout.transpose(0, 2, 3, 1).reshape(-1, cout)
    dW = (d.T @ cols).reshape(Wt.shape)
    db = d.sum(axis=0)
    dx = _col2im(d @ Wt.reshape(cout, -1), x_shape, k)
    return dx, dW, db


# --- parameters ---------------------------------------------------------

@dataclass
class QFunctionParams:
    weights: dict
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 2.0 ** -5
    gamma: float = 0.2
    velocity: dict = field(default=None)
    step: int = 0

    def __post_init__(self):
        for name, cin, cout, k, _ in LAYERS:
            W, b = self.weights[name]
            if W.shape != (cout, cin, k, k) or b.shape != (cout,):
                raise ShapeError(f"layer {name}: got {W.shape}, {b.shape}")
        if self.velocity is None:
            self.velocity = {n: (np.zeros_like(W), np.zeros_like(b))
                             for n, (W, b) in self.weights.items()}

    @classmethod
    def init(cls, rng: np.random.Generator, output_bias: float = 0.05, **hyper):
        weights = {}
        for name, cin, cout, k, _ in LAYERS:
            fan_in = cin * k * k
            std = np.sqrt(2.0 / fan_in) if name != "head2" else 0.01
            weights[name] = (rng.normal(0.0, std, size=(cout, cin, k, k)), np.zeros(cout))
        weights["head2"] = (weights["head2"][0], np.full(1, float(output_bias)))
        return cls(weights, **hyper)

    @classmethod
    def zeros(cls, **hyper):
        return cls({name: (np.zeros((cout, cin, k, k)), np.zeros(cout))
                    for name, cin, cout, k, _ in LAYERS}, **hyper)

    @property
    def hyper(self) -> dict:
        return dict(lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                    gamma=self.gamma)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.concatenate([self.weights[n][0].ravel(), self.weights[n][1]])
                               for n in LAYER_NAMES])

    def with_flat(self, vec) -> "QFunctionParams":
        vec = np.asarray(vec, float)
        weights, i = {}, 0
        for name, cin, cout, k, _ in LAYERS:
            nw = cout * cin * k * k
            W = vec[i:i + nw].reshape(cout, cin, k, k)
            b = vec[i + nw:i + nw + cout].copy()
            weights[name] = (W.copy(), b)
            i += nw + cout
        if i != vec.size:
            raise ShapeError(f"flat vector has {vec.size} entries, expected {i}")
        return QFunctionParams(weights, **self.hyper,
                               velocity={n: (v[0].copy(), v[1].copy())
                                         for n, v in self.velocity.items()},
                               step=self.step)

    def copy(self) -> "QFunctionParams":
        return self.with_flat(self.flat())

    @property
    def n_params(self) -> int:
        return int(self.flat().size)


# --- network --------------------------------------------------------------

def _network_inputs(rgb, depth):
    rgb = np.asarray(rgb, float)
    depth = np.asarray(depth, float)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or depth.shape != rgb.shape[:2]:
        raise ShapeError(f"state dims rgb {rgb.shape} / depth {depth.shape} do not match")
    return rgb.transpose(2, 0, 1), depth[None] / DEPTH_SCALE


def _forward_batch(color, depth, params: QFunctionParams, keep=False):
    """Run the unrotated network on (B, 3, H, W) and (B, 1, H, W) inputs."""
    cache = {}
    h = {"color": color, "depth": depth}
    for stream in ("color", "depth"):
        x = h[stream]
        for name in (stream + "1", stream + "2"):
            W, b = params.weights[name]
            z, cols = conv_forward(x, W, b)
            cache[name] = (x.shape, cols, z)
            x = np.maximum(z, 0.0)
        h[stream] = x
    x = np.concatenate([h["color"], h["depth"]], axis=1)
    for name in ("head1", "head2"):
        W, b = params.weights[name]
        z, cols = conv_forward(x, W, b)
        cache[name] = (x.shape, cols, z)
        x = np.maximum(z, 0.0) if name == "head1" else z
    return (x[:, 0], cache) if keep else x[:, 0]


def q_forward(rgb, depth, params: QFunctionParams, rotations=None) -> np.ndarray:
    """Affordance maps, one per rotation, shape (16, H, W).

    Map ``k`` scores a grasp whose jaw axis makes angle ``2 pi k / 16`` with
    the crop's first axis.
    """
    color, dep = _network_inputs(rgb, depth)
    ks = range(N_ROTATIONS) if rotations is None else rotations
    angles = [rotation_angle(k) for k in ks]
    col_in = np.stack([rotate(color, -a) for a in angles])
    dep_in = np.stack([rotate(dep, -a) for a in angles])
    out = _forward_batch(col_in, dep_in, params)
    return np.stack([rotate(o, a) for o, a in zip(out, angles)])


def q_value_and_grad(rgb, depth, params: QFunctionParams, k: int, cell, upstream=1.0):
    """Q at one executed (rotation, cell) and its gradient w.r.t. all weights.

    Only rotation ``k`` is evaluated, and the gradient is seeded solely at the
    executed cell of the back-rotated map.
    """
    color, dep = _network_inputs(rgb, depth)
    a = rotation_angle(k)
    col_in = rotate(color, -a)[None]
    dep_in = rotate(dep, -a)[None]
    out, cache = _forward_batch(col_in, dep_in, params, keep=True)
    qmap = rotate(out[0], a)
    i, j = cell
    q = float(qmap[i, j])
    seed = np.zeros_like(qmap)
    seed[i, j] = upstream
    dout = rotate_adjoint(seed, a)[None, None]
    grads = {}
    W, _ = params.weights["head2"]
    shape, cols, _ = cache["head2"]
    dx, dW, db = conv_backward(dout, cols, shape, W)
    grads["head2"] = (dW, db)
    shape, cols, z = cache["head1"]
    dz = dx * (z > 0)
    dx, dW, db = conv_backward(dz, cols, shape, params.weights["head1"][0])
    grads["head1"] = (dW, db)
    split = {"color": dx[:, :16], "depth": dx[:, 16:]}
    for stream in ("color", "depth"):
        d = split[stream]
        for name in (stream + "2", stream + "1"):
            shape, cols, z = cache[name]
            dz = d * (z > 0)
            d, dW, db = conv_backward(dz, cols, shape, params.weights[name][0])
            grads[name] = (dW, db)
    return q, grads


def flatten_grads(grads) -> np.ndarray:
    return np.concatenate([np.concatenate([grads[n][0].ravel(), grads[n][1]])
                           for n in LAYER_NAMES])
