"""Differentiable primitives with hand-written backward passes.

Every layer follows the same protocol::

    y, cache = layer.forward(x, train)
    dx = layer.backward(dy, cache)

``backward`` accumulates parameter gradients into ``Parameter.grad`` (unless
the parameter is frozen) and returns the gradient with respect to the input.
Caches are returned rather than stored so one layer can be run several times
before a single backward sweep, which the three-image ReID pass relies on.

Arrays are plain ``numpy.ndarray``; training runs in float32 and every op
preserves the dtype it is given, so the gradient checker can run in float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class Parameter:
    """A named array with gradient and Adam moment buffers.

    ``trainable=False`` marks a buffer (e.g. BatchNorm running statistics):
    it is checkpointed but never touched by the optimizer.
    """

    def __init__(self, value: np.ndarray, name: str = "", trainable: bool = True):
        self.value = np.asarray(value)
        self.name = name
        self.trainable = trainable
        self.frozen = False
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen or not self.trainable:
            return
        if g.shape != self.value.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {self.name} {self.value.shape}")
        self.grad += g

    def zero_grad(self) -> None:
        self.grad[...] = 0

    def __repr__(self) -> str:
        flag = " frozen" if self.frozen else ""
        return f"Parameter({self.name!r}, shape={self.value.shape}{flag})"


class Module:
    """Minimal container: subclasses list their parameters and children."""

    def _params(self) -> list[tuple[str, Parameter]]:
        return []

    def _children(self) -> list[tuple[str, "Module"]]:
        return []

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params():
            yield prefix + name, p
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {name: p.value for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != model shape {p.value.shape}")
            p.value = arr.astype(p.value.dtype, copy=True)
            p.grad = np.zeros_like(p.value)
            p.adam_m = np.zeros_like(p.value)
            p.adam_v = np.zeros_like(p.value)

    def freeze(self) -> None:
        for p in self.parameters():
            p.frozen = True

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast every parameter and buffer in place (used by gradient checks)."""
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.grad = np.zeros_like(p.value)
            p.adam_m = np.zeros_like(p.value)
            p.adam_v = np.zeros_like(p.value)
        return self


# ---------------------------------------------------------------------------
# functional forms


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None, stride: int = 1, pad: int = 0):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and kernel, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.shape
    cout, wcin, kh, kw = w.shape
    if cin != wcin:
        raise ValueError(f"conv2d channel mismatch: input {x.shape} has {cin} channels, kernel {w.shape} expects {wcin}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{wd + 2 * pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wmat = w.reshape(cout, -1)
    # small kernels copy faster into kernel-major columns, large ones into pixel-major rows
    by_row = kh * kw > 9
    if by_row:
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, cin * kh * kw)
        out = cols @ wmat.T
        if b is not None:
            out += b
        y = out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2)
    else:
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(cin * kh * kw, n * ho * wo)
        out = wmat @ cols
        if b is not None:
            out += b[:, None]
        y = out.reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)
    cache = (x.shape, xp.shape, cols, by_row, w, stride, pad, ho, wo)
    return np.ascontiguousarray(y), cache


def conv2d_backward(dy: np.ndarray, cache, need_dx: bool = True):
    xshape, xpshape, cols, by_row, w, stride, pad, ho, wo = cache
    n, cin, h, wd = xshape
    cout, _, kh, kw = w.shape
    wmat = w.reshape(cout, -1)
    dy2 = dy.transpose(1, 0, 2, 3).reshape(cout, -1)
    dw = (dy2 @ cols if by_row else dy2 @ cols.T).reshape(w.shape)
    db = dy2.sum(axis=1)
    if not need_dx:
        return None, dw, db
    # dcols as [n, cin, kh, kw, ho, wo] views in either layout
    if by_row:
        dcols = (dy2.T @ wmat).reshape(n, ho, wo, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    else:
        dcols = (wmat.T @ dy2).reshape(cin, kh, kw, n, ho, wo).transpose(3, 0, 1, 2, 4, 5)
    dxp = np.zeros(xpshape, dtype=dcols.dtype)
    hs = stride * (ho - 1) + 1
    ws = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + hs:stride, j:j + ws:stride] += dcols[:, :, i, j]
    dx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
    return np.ascontiguousarray(dx), dw, db


def _pool_windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def maxpool2x2_forward(x: np.ndarray):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    y = np.maximum(np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]),
                   np.maximum(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]))
    return y, x


def maxpool2x2_backward(dy: np.ndarray, cache):
    x = cache
    n, c, h, w = x.shape
    # argmax returns the first maximum, i.e. row-major window order on ties
    idx = _pool_windows(x).argmax(axis=-1)
    dwin = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(dwin, idx[..., None], dy[..., None], axis=-1)
    return dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)


def linear_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ValueError(f"linear dim mismatch: input {x.shape} vs weight {w.shape}")
    y = x @ w
    if b is not None:
        y = y + b
    return y, (x, w)


def linear_backward(dy: np.ndarray, cache, need_dx: bool = True):
    x, w = cache
    dw = x.T @ dy
    db = dy.sum(axis=0)
    dx = dy @ w.T if need_dx else None
    return dx, dw, db


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask):
    # subgradient at exactly 0 is 0
    return dy * mask


def batchnorm2d_forward(x, gamma, beta, running_mean, running_var, train: bool,
                        eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
    """Returns ``(y, cache, new_running_mean, new_running_var)``."""
    n, c, h, w = x.shape
    if gamma.shape != (c,):
        raise ValueError(f"batchnorm2d expects {c} channels, gamma has shape {gamma.shape}")
    if train:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm2d in train mode needs at least 2 values per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        new_rm = (1 - momentum) * running_mean + momentum * mean
        new_rv = (1 - momentum) * running_var + momentum * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var
        new_rm, new_rv = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    y = gamma[None, :, None, None] * xhat + beta[None, :, None, None]
    cache = (xhat, inv_std.astype(x.dtype), gamma, train)
    return y.astype(x.dtype, copy=False), cache, new_rm.astype(running_mean.dtype), new_rv.astype(running_var.dtype)


def batchnorm2d_backward(dy: np.ndarray, cache):
    xhat, inv_std, gamma, train = cache
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    g = (gamma * inv_std)[None, :, None, None]
    if not train:
        return dy * g, dgamma, dbeta
    m = dy.shape[0] * dy.shape[2] * dy.shape[3]
    dx = g * (dy - dbeta[None, :, None, None] / m - xhat * dgamma[None, :, None, None] / m)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# layers


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = cin * k * k
        self.weight = Parameter(_kaiming_uniform(rng, (cout, cin, k, k), fan_in))
        bound = 1.0 / math.sqrt(fan_in)
        self.bias = Parameter(rng.uniform(-bound, bound, size=cout).astype(np.float32))
        self.stride = stride
        self.pad = pad

    def _params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, train=True):
        return conv2d_forward(x, self.weight.value, self.bias.value, self.stride, self.pad)

    def backward(self, dy, cache, need_dx=True):
        dx, dw, db = conv2d_backward(dy, cache, need_dx)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, din: int, dout: int, rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.weight = Parameter(_kaiming_uniform(rng, (din, dout), din))
        bound = 1.0 / math.sqrt(din)
        self.bias = Parameter(rng.uniform(-bound, bound, size=dout).astype(np.float32))

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    def _params(self):
        return [("weight", self.weight), ("bias", self.bias)]

    def forward(self, x, train=True):
        return linear_forward(x, self.weight.value, self.bias.value)

    def backward(self, dy, cache, need_dx=True):
        dx, dw, db = linear_backward(dy, cache, need_dx)
        self.weight.accumulate(dw)
        self.bias.accumulate(db)
        return dx


class BatchNorm2d(Module):
    def __init__(self, c: int):
        self.gamma = Parameter(np.ones(c, np.float32))
        self.beta = Parameter(np.zeros(c, np.float32))
        self.running_mean = Parameter(np.zeros(c, np.float32), trainable=False)
        self.running_var = Parameter(np.ones(c, np.float32), trainable=False)

    def _params(self):
        return [("gamma", self.gamma), ("beta", self.beta),
                ("running_mean", self.running_mean), ("running_var", self.running_var)]

    def forward(self, x, train=True):
        y, cache, rm, rv = batchnorm2d_forward(
            x, self.gamma.value, self.beta.value,
            self.running_mean.value, self.running_var.value, train)
        if train and not self.running_mean.frozen:
            self.running_mean.value = rm
            self.running_var.value = rv
        return y, cache

    def backward(self, dy, cache, need_dx=True):
        dx, dgamma, dbeta = batchnorm2d_backward(dy, cache)
        self.gamma.accumulate(dgamma)
        self.beta.accumulate(dbeta)
        return dx


class ReLU(Module):
    def forward(self, x, train=True):
        return relu_forward(x)

    def backward(self, dy, cache, need_dx=True):
        return relu_backward(dy, cache)


class MaxPool2x2(Module):
    def forward(self, x, train=True):
        return maxpool2x2_forward(x)

    def backward(self, dy, cache, need_dx=True):
        return maxpool2x2_backward(dy, cache)


class Flatten(Module):
    def forward(self, x, train=True):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, need_dx=True):
        return dy.reshape(cache)


class GlobalAvgPool(Module):
    def forward(self, x, train=True):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache, need_dx=True):
        n, c, h, w = cache
        return np.broadcast_to(dy[:, :, None, None] / (h * w), cache).astype(dy.dtype)


class Sequential(Module):
    def __init__(self, layers: Sequence[tuple[str, Module]]):
        self.layers = list(layers)

    def _children(self):
        return self.layers

    def forward(self, x, train=True, trace: list | None = None):
        caches = []
        for name, layer in self.layers:
            x, c = layer.forward(x, train)
            caches.append(c)
            if trace is not None:
                trace.append((name, x.shape))
        return x, caches

    def backward(self, dy, caches, need_dx=True):
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            _, layer = self.layers[i]
            dy = layer.backward(dy, caches[i], need_dx=need_dx or i > 0)
            if dy is None:
                break
        return dy


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8, weight_decay: float = 0.0, t: int = 1) -> None:
    """One Adam update with bias correction; L2 decay is folded into the gradient.

    Frozen parameters and buffers are skipped entirely, so their value,
    gradient and moments stay bit-identical.
    """
    if t < 1:
        raise ValueError(f"adam step counter must be >= 1, got {t}")
    live = [p for p in params if p.trainable and not p.frozen]
    for p in live:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for p in live:
        g = p.grad + weight_decay * p.value if weight_decay else p.grad
        p.adam_m = beta1 * p.adam_m + (1 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1 - beta2) * g * g
        mhat = p.adam_m / c1
        vhat = p.adam_v / c2
        p.value = (p.value - lr * mhat / (np.sqrt(vhat) + eps)).astype(p.value.dtype, copy=False)
        p.adam_m = p.adam_m.astype(p.value.dtype, copy=False)
        p.adam_v = p.adam_v.astype(p.value.dtype, copy=False)
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_error: float
    rel_tol: float
    num_checked: int
    worst: tuple[int, int] | None = None  # (input index, flat element index)
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error < self.rel_tol

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.rel_tol:g}, {self.num_checked} elements)"


def gradient_check(closure: Callable[[list[np.ndarray]], tuple[float, list[np.ndarray]]],
                   inputs: Sequence[np.ndarray], eps: float = 1e-3, rel_tol: float = 1e-3,
                   max_per_input: int | None = None, rng: np.random.Generator | None = None,
                   floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``closure(inputs)`` must return ``(scalar, [d scalar / d input_i])``.
    Inputs are promoted to float64. The per-element relative error is
    ``|a - n| / max(|a|, |n|, floor)``; ``max_per_input`` limits the check to a
    random subset of elements of each input.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    rng = rng if rng is not None else np.random.default_rng(0)
    xs = [np.array(x, dtype=np.float64) for x in inputs]
    _, analytic = closure(xs)
    # copy now: closures may hand back live gradient buffers that later calls overwrite
    analytic = [np.array(g, dtype=np.float64) for g in analytic]
    worst_err, worst_at, total = 0.0, None, 0
    per_input = []
    for i, x in enumerate(xs):
        ga = analytic[i].reshape(-1)
        flat = x.reshape(-1)
        idx = np.arange(flat.size)
        if max_per_input is not None and flat.size > max_per_input:
            idx = rng.choice(flat.size, size=max_per_input, replace=False)
        err_i = 0.0
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            fp, _ = closure(xs)
            flat[j] = orig - eps
            fm, _ = closure(xs)
            flat[j] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(ga[j] - num) / max(abs(ga[j]), abs(num), floor)
            if not np.isfinite(err):
                err = np.inf
            if err > err_i:
                err_i = err
            if err > worst_err:
                worst_err, worst_at = err, (i, int(j))
            total += 1
        per_input.append(err_i)
    return GradCheckReport(worst_err, rel_tol, total, worst_at, per_input)
