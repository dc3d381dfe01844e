"""Pairwise spatial transformer.

The holistic and partial images are stacked along the channel axis, a small
CNN regresses the six affine parameters, and the holistic image is resampled
through the induced grid. Coordinates are normalized to [-1, 1] with the
align-corners convention: -1 and +1 land on the first and last pixel centres.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nnops import (BatchNorm2d, Conv2d, Flatten, Linear, MaxPool2x2, Module, ReLU,
                    Sequential, conv2d_forward)

IDENTITY_THETA = np.array([1, 0, 0, 0, 1, 0], dtype=np.float32)


def concat_pair(holistic: np.ndarray, partial: np.ndarray) -> np.ndarray:
    if holistic.shape != partial.shape:
        raise ValueError(f"pair shape mismatch: holistic {holistic.shape} vs partial {partial.shape}")
    return np.concatenate([holistic, partial], axis=1)


def _target_axes(h: int, w: int) -> tuple[np.ndarray, np.ndarray]:
    return np.linspace(-1.0, 1.0, w), np.linspace(-1.0, 1.0, h)


def grid_generate(theta: np.ndarray, h_out: int, w_out: int) -> np.ndarray:
    """Source coordinates ``[N,H,W,2]`` (x then y) for each output pixel.

    Always float64: in single precision the identity grid misses pixel
    centres by ~1e-5 px, which shows up as resampling error.
    """
    if h_out < 2 or w_out < 2:
        raise ValueError(f"grid needs at least 2x2 outputs, got {h_out}x{w_out}")
    theta = np.asarray(theta)
    if theta.ndim != 2 or theta.shape[1] != 6:
        raise ValueError(f"theta must be [N,6], got {theta.shape}")
    xt, yt = _target_axes(h_out, w_out)
    a = theta.astype(np.float64).reshape(-1, 2, 3)
    xs = a[:, 0, 0, None, None] * xt[None, None, :] + a[:, 0, 1, None, None] * yt[None, :, None] + a[:, 0, 2, None, None]
    ys = a[:, 1, 0, None, None] * xt[None, None, :] + a[:, 1, 1, None, None] * yt[None, :, None] + a[:, 1, 2, None, None]
    return np.stack([xs, ys], axis=-1)


def grid_generate_backward(dgrid: np.ndarray) -> np.ndarray:
    """Gradient with respect to theta, given the gradient of the grid."""
    n, h, w, _ = dgrid.shape
    xt, yt = _target_axes(h, w)
    gx = dgrid[..., 0].astype(np.float64)
    gy = dgrid[..., 1].astype(np.float64)
    out = np.empty((n, 6))
    for k, g in enumerate((gx, gy)):
        out[:, 3 * k + 0] = (g * xt[None, None, :]).sum(axis=(1, 2))
        out[:, 3 * k + 1] = (g * yt[None, :, None]).sum(axis=(1, 2))
        out[:, 3 * k + 2] = g.sum(axis=(1, 2))
    return out.astype(dgrid.dtype)


def bilinear_sample(source: np.ndarray, grid: np.ndarray):
    """Sample ``source [N,C,H,W]`` at ``grid [N,Ho,Wo,2]``; zero outside the frame.

    Returns ``(output, cache)``.
    """
    n, c, h, w = source.shape
    if grid.shape[0] != n or grid.shape[-1] != 2:
        raise ValueError(f"grid {grid.shape} does not match source batch {source.shape}")
    px = (grid[..., 0].astype(np.float64) + 1.0) * 0.5 * (w - 1)
    py = (grid[..., 1].astype(np.float64) + 1.0) * 0.5 * (h - 1)
    x0 = np.floor(px)
    y0 = np.floor(py)
    wx = px - x0
    wy = py - y0

    # gather from a copy with one zero row/column before the frame and two after; cells with
    # no corner inside the frame are sent to the far border, so every corner is base + offset
    hp, wp = h + 3, w + 3
    xa = np.where((x0 < -1) | (x0 > w - 1), w, x0).astype(np.int64) + 1
    ya = np.where((y0 < -1) | (y0 > h - 1), h, y0).astype(np.int64) + 1
    buf = np.zeros((n, c, hp, wp), dtype=source.dtype)
    buf[:, :, 1:h + 1, 1:w + 1] = source
    flat = buf.ravel()
    base = (np.arange(n * c) * (hp * wp)).reshape(n, c, 1, 1) + (ya * wp + xa)[:, None]
    v00, v01, v10, v11 = vals = [flat.take(base + off) for off in (0, 1, wp, wp + 1)]
    wx_ = wx[:, None].astype(source.dtype)
    wy_ = wy[:, None].astype(source.dtype)
    top = v00 + (v01 - v00) * wx_
    bot = v10 + (v11 - v10) * wx_
    out = top + (bot - top) * wy_
    cache = (source.shape, source.dtype, wx, wy, vals, base, (w - 1) * 0.5, (h - 1) * 0.5)
    return out, cache


def bilinear_sample_backward(dout: np.ndarray, cache, need_source: bool = True):
    """Returns ``(d_source or None, d_grid)``."""
    shape, dtype, wx, wy, vals, base, sx, sy = cache
    n, c, h, w = shape
    v00, v01, v10, v11 = vals
    wx_ = wx[:, None]
    wy_ = wy[:, None]
    dpx = ((1 - wy_) * (v01 - v00) + wy_ * (v11 - v10)) * dout
    dpy = ((1 - wx_) * (v10 - v00) + wx_ * (v11 - v01)) * dout
    dgrid = np.stack([dpx.sum(axis=1) * sx, dpy.sum(axis=1) * sy], axis=-1).astype(dtype)

    dsrc = None
    if need_source:
        weights = ((1 - wx_) * (1 - wy_), wx_ * (1 - wy_), (1 - wx_) * wy_, wx_ * wy_)
        hp, wp = h + 3, w + 3
        size = n * c * hp * wp
        idx = base.ravel()
        acc = np.zeros(size)
        for off, wt in zip((0, 1, wp, wp + 1), weights):
            acc += np.bincount(idx + off, weights=(dout * wt).ravel(), minlength=size)
        dsrc = acc.reshape(n, c, hp, wp)[:, :, 1:h + 1, 1:w + 1].astype(dtype)
    return dsrc, dgrid


def affine_warp(source: np.ndarray, theta: np.ndarray, h_out: int | None = None,
                w_out: int | None = None) -> np.ndarray:
    """Convenience: sample ``source`` through the affine map ``theta``."""
    h_out = source.shape[2] if h_out is None else h_out
    w_out = source.shape[3] if w_out is None else w_out
    out, _ = bilinear_sample(source, grid_generate(theta, h_out, w_out))
    return out


class LocalizationNet(Module):
    """Conv(7x7,16,s2) BN ReLU, pool, Conv(3x3,32,s2) BN ReLU, pool, FC 512/128/32/6.

    FC4 starts with zero weights and the identity bias, so a fresh network
    outputs the identity transform for any input.
    """

    def __init__(self, in_channels: int = 6, height: int = 256, width: int = 128,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if height % 16 or width % 16:
            raise ValueError(f"localization net needs H, W divisible by 16, got {height}x{width}")
        self.height, self.width = height, width
        self.flat_len = 32 * (height // 16) * (width // 16)
        fc4 = Linear(32, 6, rng)
        fc4.weight.value[...] = 0
        fc4.bias.value[...] = IDENTITY_THETA
        self.net = Sequential([
            ("conv1", Conv2d(in_channels, 16, 7, stride=2, pad=3, rng=rng)),
            ("bn1", BatchNorm2d(16)),
            ("relu1", ReLU()),
            ("pool1", MaxPool2x2()),
            ("conv2", Conv2d(16, 32, 3, stride=2, pad=1, rng=rng)),
            ("bn2", BatchNorm2d(32)),
            ("relu2", ReLU()),
            ("pool2", MaxPool2x2()),
            ("flatten", Flatten()),
            ("fc1", Linear(self.flat_len, 512, rng)),
            ("relu_fc1", ReLU()),
            ("fc2", Linear(512, 128, rng)),
            ("relu_fc2", ReLU()),
            ("fc3", Linear(128, 32, rng)),
            ("relu_fc3", ReLU()),
            ("fc4", fc4),
        ])

    def _children(self):
        return self.net.layers

    def forward(self, pair: np.ndarray, train: bool = True, trace: list | None = None):
        # the first half of the stack runs separately so the flatten length can be checked
        head, tail = Sequential(self.net.layers[:9]), Sequential(self.net.layers[9:])
        feat, c1 = head.forward(pair, train, trace)
        if feat.shape[1] != self.flat_len:
            raise ValueError(f"flatten length {feat.shape[1]} does not match FC1 input {self.flat_len} "
                             f"(input {pair.shape})")
        theta, c2 = tail.forward(feat, train, trace)
        return theta, c1 + c2

    def backward(self, dtheta: np.ndarray, caches, need_dx: bool = False):
        return self.net.backward(dtheta, caches, need_dx=need_dx)

    def predict_one_partial(self, holistic: np.ndarray, partial: np.ndarray) -> np.ndarray:
        """Inference for N holistic images against one partial ``[1,C,H,W]``.

        Conv1 is linear in its input, so the partial's half of it is computed once
        and broadcast over the batch instead of being repeated N times.
        """
        conv1 = self.net.layers[0][1]
        c = holistic.shape[1]
        if partial.shape[0] != 1 or partial.shape[1:] != holistic.shape[1:]:
            raise ValueError(f"pair shape mismatch: holistic {holistic.shape} vs partial {partial.shape}")
        w = conv1.weight.value
        yh, _ = conv2d_forward(holistic, np.ascontiguousarray(w[:, :c]), conv1.bias.value, conv1.stride, conv1.pad)
        yp, _ = conv2d_forward(partial, np.ascontiguousarray(w[:, c:]), None, conv1.stride, conv1.pad)
        feat, _ = Sequential(self.net.layers[1:9]).forward(yh + yp, train=False)
        if feat.shape[1] != self.flat_len:
            raise ValueError(f"flatten length {feat.shape[1]} does not match FC1 input {self.flat_len} "
                             f"(input {holistic.shape})")
        theta, _ = Sequential(self.net.layers[9:]).forward(feat, train=False)
        return theta


@dataclass
class STNCache:
    loc: list
    sample: tuple
    train: bool


class STN(Module):
    """``(holistic, partial) -> (affined, theta)``; the affined image is sampled from the holistic one."""

    def __init__(self, channels: int = 3, height: int = 256, width: int = 128,
                 rng: np.random.Generator | None = None):
        self.channels, self.height, self.width = channels, height, width
        self.loc = LocalizationNet(2 * channels, height, width, rng)

    def _children(self):
        return [("loc", self.loc)]

    def predict_theta(self, holistic, partial, train: bool = True):
        """``(theta, cache)``; a single partial is paired with every holistic image."""
        if partial.shape[0] == 1 and holistic.shape[0] > 1:
            if not train:
                return self.loc.predict_one_partial(holistic, partial), None
            partial = np.ascontiguousarray(np.broadcast_to(partial, holistic.shape))
        return self.loc.forward(concat_pair(holistic, partial), train)

    def forward(self, holistic: np.ndarray, partial: np.ndarray, train: bool = True,
                theta_override: np.ndarray | None = None):
        if theta_override is None:
            theta, loc_cache = self.predict_theta(holistic, partial, train)
        else:
            theta = np.broadcast_to(np.asarray(theta_override, holistic.dtype), (holistic.shape[0], 6)).copy()
            loc_cache = None
        grid = grid_generate(theta, holistic.shape[2], holistic.shape[3])
        affined, sample_cache = bilinear_sample(holistic, grid)
        return affined, theta, STNCache(loc_cache, sample_cache, train)

    def backward(self, daffined: np.ndarray, cache: STNCache) -> np.ndarray:
        """Backpropagate to the localization parameters; returns d theta."""
        _, dgrid = bilinear_sample_backward(daffined, cache.sample, need_source=False)
        dtheta = grid_generate_backward(dgrid)
        if cache.loc is not None:
            self.loc.backward(dtheta, cache.loc)
        return dtheta
