"""Registry of finite-difference checks for every differentiable primitive.

Each case builds a random float64 instance and returns ``(closure, inputs)``
for :func:`stnreid.nnops.gradient_check`. Paths that pass through bilinear
interpolation are only piecewise smooth and are checked at 1e-2.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .data import make_rng
from .nnops import (GradCheckReport, batchnorm2d_backward, batchnorm2d_forward, conv2d_backward,
                    conv2d_forward, gradient_check, linear_backward, linear_forward,
                    maxpool2x2_backward, maxpool2x2_forward, relu_backward, relu_forward)
from .reid import adaptive_triplet_loss, id_loss, stn_loss
from .stn import (STN, LocalizationNet, bilinear_sample, bilinear_sample_backward, grid_generate,
                  grid_generate_backward)

Builder = Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]


@dataclass(frozen=True)
class GradCase:
    name: str
    build: Builder
    rel_tol: float = 1e-3
    eps: float = 1e-4
    max_per_input: int | None = None


def _smooth_image(rng, n, c, h, w, max_freq=2.0):
    # sum of a few low-frequency waves: bilinear kinks then cost little curvature
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    img = np.zeros((n, c, h, w))
    for _ in range(3):
        fy, fx = rng.uniform(0.25 * max_freq, max_freq, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        amp = rng.normal(size=(n, c, 1, 1))
        img += amp * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return img


def _off_lattice(grid, h, w, margin):
    px = (grid[..., 0] + 1) * 0.5 * (w - 1)
    py = (grid[..., 1] + 1) * 0.5 * (h - 1)
    frac = np.concatenate([px.ravel() % 1.0, py.ravel() % 1.0])
    return np.minimum(frac, 1.0 - frac).min() > margin


def _conv(rng):
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    x = rng.normal(size=(2, 3, 7, 6))
    w = rng.normal(size=(4, 3, 3, 3)) * 0.5
    b = rng.normal(size=4)
    r = rng.normal(size=conv2d_forward(x, w, b, stride, pad)[0].shape)

    def f(v):
        y, c = conv2d_forward(v[0], v[1], v[2], stride, pad)
        dx, dw, db = conv2d_backward(r, c)
        return float((y * r).sum()), [dx, dw, db]
    return f, [x, w, b]


def _maxpool(rng):
    # well separated values so no window has a near tie
    x = rng.permutation(2 * 3 * 6 * 4).reshape(2, 3, 6, 4) * 0.1 + rng.uniform(0, 0.01, (2, 3, 6, 4))
    r = rng.normal(size=(2, 3, 3, 2))

    def f(v):
        y, c = maxpool2x2_forward(v[0])
        return float((y * r).sum()), [maxpool2x2_backward(r, c)]
    return f, [x]


def _linear(rng):
    x, w, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3)), rng.normal(size=3)
    r = rng.normal(size=(5, 3))

    def f(v):
        y, c = linear_forward(*v)
        dx, dw, db = linear_backward(r, c)
        return float((y * r).sum()), [dx, dw, db]
    return f, [x, w, b]


def _batchnorm(rng):
    x = rng.normal(size=(3, 4, 3, 2)) * 2 + 1
    g, b = rng.uniform(0.5, 1.5, 4), rng.normal(size=4)
    r = rng.normal(size=x.shape)

    def f(v):
        y, c, _, _ = batchnorm2d_forward(v[0], v[1], v[2], np.zeros(4), np.ones(4), True)
        dx, dg, db = batchnorm2d_backward(r, c)
        return float((y * r).sum()), [dx, dg, db]
    return f, [x, g, b]


def _relu(rng):
    x = rng.normal(size=(4, 9))
    x = np.where(np.abs(x) < 0.05, 0.5, x)  # keep away from the kink
    r = rng.normal(size=x.shape)

    def f(v):
        y, m = relu_forward(v[0])
        return float((y * r).sum()), [relu_backward(r, m)]
    return f, [x]


def _bilinear(rng):
    src = _smooth_image(rng, 2, 2, 6, 5)
    while True:
        grid = rng.uniform(-0.9, 0.9, size=(2, 4, 3, 2))
        if _off_lattice(grid, 6, 5, 0.01):
            break
    r = rng.normal(size=(2, 2, 4, 3))

    def f(v):
        out, c = bilinear_sample(v[0], v[1])
        ds, dg = bilinear_sample_backward(r, c)
        return float((out * r).sum()), [ds, dg]
    return f, [src, grid]


def _grid(rng):
    theta = rng.normal(size=(3, 6))
    r = rng.normal(size=(3, 5, 4, 2))

    def f(v):
        g = grid_generate(v[0], 5, 4)
        return float((g * r).sum()), [grid_generate_backward(r)]
    return f, [theta]


def _theta_through_sampler(rng):
    h, w, ho, wo = 12, 8, 6, 4
    src = _smooth_image(rng, 2, 3, h, w)
    # kept inside the frame (zero padding makes the border a hard kink) and
    # redrawn until no sample point is within reach of a pixel lattice line
    while True:
        theta = np.tile([0.7, 0.0, 0.0, 0.0, 0.7, 0.0], (2, 1)) + rng.uniform(-0.05, 0.05, size=(2, 6))
        if _off_lattice(grid_generate(theta, ho, wo), h, w, 0.01):
            break
    r = rng.normal(size=(2, 3, ho, wo))

    def f(v):
        out, c = bilinear_sample(src, grid_generate(v[0], ho, wo))
        _, dg = bilinear_sample_backward(r, c, need_source=False)
        return float((out * r).sum()), [grid_generate_backward(dg)]
    return f, [theta]


def _id_loss(rng):
    n, eps = int(rng.integers(3, 7)), float(rng.choice([0.0, 0.1]))
    logits = rng.normal(size=(5, n)) * 2
    labels = rng.integers(0, n, size=5)

    def f(v):
        return id_loss(v[0], labels, eps)[0], [id_loss(v[0], labels, eps)[1]]
    return f, [logits]


def _triplet(rng):
    labels = np.repeat(np.arange(3), 3)
    feats = rng.normal(size=(9, 4))
    # margin large enough that every anchor sits on the active side of the hinge
    margin = 5.0

    def f(v):
        loss, g = adaptive_triplet_loss(v[0], labels, margin)
        return loss, [g]
    return f, [feats]


def _stn_loss(rng):
    fp, fa = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))

    def f(v):
        loss, dp, da = stn_loss(v[0], v[1])
        return loss, [dp, da]
    return f, [fp, fa]


def _param_closure(module, run):
    params = [p for p in module.parameters() if p.trainable]

    def f(v):
        for p, x in zip(params, v):
            p.value = x
        module.zero_grad()
        return run(), [p.grad for p in params]
    return f, [p.value.copy() for p in params]


def _loc_net(rng):
    net = LocalizationNet(6, 32, 16, rng=rng).astype(np.float64)
    # a random last layer so every parameter receives gradient
    net.net.layers[-1][1].weight.value = rng.normal(scale=0.3, size=(32, 6))
    pair = rng.normal(size=(2, 6, 32, 16))
    r = rng.normal(size=(2, 6))

    def run():
        theta, caches = net.forward(pair, train=True)
        net.backward(r, caches)
        return float((theta * r).sum())
    return _param_closure(net, run)


def _stn_end_to_end(rng):
    h, w = 32, 16
    stn = STN(3, h, w, rng=rng).astype(np.float64)
    fc4 = stn.loc.net.layers[-1][1]
    # theta stays within a few hundredths of a pixel of a half-pixel shift, so every
    # sample point sits mid-cell and no finite-difference step crosses a bilinear kink
    fc4.weight.value = rng.normal(scale=1e-3, size=(32, 6))
    fc4.bias.value = np.array([1.0, 0.0, 1.0 / (w - 1), 0.0, 1.0, 1.0 / (h - 1)])
    hol = _smooth_image(rng, 2, 3, h, w)
    par = _smooth_image(rng, 2, 3, h, w)
    r = rng.normal(size=(2, 3, h, w))

    def run():
        out, _, cache = stn.forward(hol, par, train=True)
        stn.backward(r, cache)
        return float((out * r).sum())
    return _param_closure(stn, run)


SUITE: dict[str, GradCase] = {c.name: c for c in [
    GradCase("conv2d", _conv),
    GradCase("maxpool2x2", _maxpool),
    GradCase("linear", _linear),
    GradCase("batchnorm2d", _batchnorm),
    GradCase("relu", _relu),
    GradCase("bilinear_sample", _bilinear, rel_tol=1e-2),
    GradCase("grid_generate", _grid),
    GradCase("theta_through_sampler", _theta_through_sampler, rel_tol=1e-2),
    GradCase("id_loss", _id_loss),
    GradCase("adaptive_triplet_loss", _triplet),
    GradCase("stn_loss", _stn_loss),
    GradCase("localization_net", _loc_net, max_per_input=12),
    GradCase("stn_end_to_end", _stn_end_to_end, rel_tol=1e-2, max_per_input=8),
]}


@dataclass
class SuiteResult:
    name: str
    instance: int
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def run_case(name: str, instance: int = 0, seed: int = 0) -> SuiteResult:
    case = SUITE[name]
    rng = make_rng(seed, 9, list(SUITE).index(name), instance)
    closure, inputs = case.build(rng)
    rep = gradient_check(closure, inputs, eps=case.eps, rel_tol=case.rel_tol,
                         max_per_input=case.max_per_input, rng=rng)
    return SuiteResult(name, instance, rep)


def run_suite(names: Iterable[str] | None = None, instances: int = 5, seed: int = 0) -> list[SuiteResult]:
    names = list(SUITE) if names is None else list(names)
    unknown = [n for n in names if n not in SUITE]
    if unknown:
        raise KeyError(f"unknown gradient cases {unknown}; known: {sorted(SUITE)}")
    return [run_case(n, i, seed) for n in names for i in range(instances)]
