"""Feature extractor and the ReID / alignment losses.

Each loss returns its value together with the gradient(s) of that value with
respect to its array inputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Protocol, Sequence

import numpy as np

from .nnops import BatchNorm2d, Conv2d, GlobalAvgPool, Linear, Module, ReLU, Sequential

KINDS = ("h", "p", "a")  # holistic, partial, affined
TERM_NAMES = ("id_h", "id_p", "id_a", "tri_h", "tri_p", "tri_a", "stn")
DEFAULT_SMOOTHING = 0.1


@dataclass
class ReidOutput:
    logits: np.ndarray | None  # [B, num_ids]
    feature: np.ndarray        # [B, D]


@dataclass(frozen=True)
class ExtractorSpec:
    channels: tuple[int, ...] = (16, 32, 64, 128)
    num_ids: int = 10
    classifier: bool = True

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]


class Extractor(Module):
    """Stride-2 conv blocks, global average pooling, optional ID classifier.

    Stands in for the ResNet50 backbone: any module mapping images to
    ``(logits, feature)`` can be slotted in.
    """

    def __init__(self, spec: ExtractorSpec = ExtractorSpec(), rng: np.random.Generator | None = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.spec = spec
        layers = []
        cin = 3
        for i, cout in enumerate(spec.channels, start=1):
            layers += [(f"conv{i}", Conv2d(cin, cout, 3, stride=2, pad=1, rng=rng)),
                       (f"bn{i}", BatchNorm2d(cout)),
                       (f"relu{i}", ReLU())]
            cin = cout
        layers.append(("gap", GlobalAvgPool()))
        self.body = Sequential(layers)
        self.classifier = Linear(spec.feature_dim, spec.num_ids, rng) if spec.classifier else None
        self.min_size = 2 ** len(spec.channels)

    def _children(self):
        kids = [("body", self.body)]
        if self.classifier is not None:
            kids.append(("classifier", self.classifier))
        return kids

    def forward(self, images: np.ndarray, train: bool = True):
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"extractor expects [B,3,H,W] images, got {images.shape}")
        if min(images.shape[2:]) < self.min_size:
            raise ValueError(f"images {images.shape[2]}x{images.shape[3]} too small for "
                             f"{len(self.spec.channels)} stride-2 stages (need >= {self.min_size})")
        feat, body_cache = self.body.forward(images, train)
        logits, cls_cache = (None, None)
        if self.classifier is not None:
            logits, cls_cache = self.classifier.forward(feat, train)
        return ReidOutput(logits, feat), (body_cache, cls_cache)

    def backward(self, dlogits: np.ndarray | None, dfeat: np.ndarray | None, cache,
                 need_dx: bool = False):
        body_cache, cls_cache = cache
        d = np.zeros_like(dfeat) if dfeat is not None else None
        if dfeat is not None:
            d += dfeat
        if dlogits is not None and self.classifier is not None:
            dcls = self.classifier.backward(dlogits, cls_cache)
            d = dcls if d is None else d + dcls
        if d is None:
            return None
        return self.body.backward(d, body_cache, need_dx=need_dx)

    def features(self, images: np.ndarray) -> np.ndarray:
        out, _ = self.forward(images, train=False)
        return out.feature


def _check_labels(labels, n: int, num_classes: int | None = None) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if num_classes is not None and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): {labels.min()}..{labels.max()}")
    return labels


def id_loss(logits: np.ndarray, labels: Sequence[int], smoothing: float = 0.0):
    """Softmax cross-entropy against label-smoothed targets, batch mean.

    The true class gets ``1 - eps + eps/N``, every other class ``eps/N``.
    """
    if not 0.0 <= smoothing < 1.0:
        raise ValueError(f"smoothing must lie in [0, 1), got {smoothing}")
    b, n = logits.shape
    labels = _check_labels(labels, b, n)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    q = np.full_like(logits, smoothing / n)
    q[np.arange(b), labels] += 1.0 - smoothing
    loss = float(-(q * logp).sum() / b)
    grad = (np.exp(logp) - q) / b
    return loss, grad.astype(logits.dtype)


def pairwise_distances(features: np.ndarray) -> np.ndarray:
    diff = features[:, None, :] - features[None, :, :]
    return np.sqrt((diff * diff).sum(axis=-1))


def _masked_softmax(x: np.ndarray, mask: np.ndarray) -> np.ndarray:
    x = np.where(mask, x, -np.inf)
    x = x - x.max(axis=1, keepdims=True)
    e = np.where(mask, np.exp(x), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def adaptive_weights(dist: np.ndarray, labels: Sequence[int]):
    """Softmax weights over each anchor's positives (of +d) and negatives (of -d)."""
    labels = _check_labels(labels, dist.shape[0])
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    neg = ~same
    bad = np.flatnonzero(~pos.any(axis=1) | ~neg.any(axis=1))
    if bad.size:
        raise ValueError(f"anchors {bad.tolist()} lack a positive or a negative; "
                         "build the batch with PK sampling (K >= 2, P >= 2)")
    return _masked_softmax(dist, pos), _masked_softmax(-dist, neg), pos, neg


def adaptive_triplet_loss(features: np.ndarray, labels: Sequence[int], margin: float = 0.3):
    """Softmax-weighted triplet loss with a hinge per anchor, averaged over anchors."""
    b = features.shape[0]
    f = features.astype(np.float64)
    d = pairwise_distances(f)
    wp, wn, pos, neg = adaptive_weights(d, labels)
    sp = (wp * d).sum(axis=1)
    sn = (wn * d).sum(axis=1)
    hinge = margin + sp - sn
    loss = float(np.maximum(hinge, 0.0).mean())

    g = (hinge > 0) / b
    dd = g[:, None] * (np.where(pos, wp * (1 + d - sp[:, None]), 0.0)
                       - np.where(neg, wn * (1 - d + sn[:, None]), 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.where(d > 0, dd / d, 0.0)
    s = m + m.T
    grad = s.sum(axis=1)[:, None] * f - s @ f
    return loss, grad.astype(features.dtype)


def stn_loss(f_partial: np.ndarray, f_affined: np.ndarray):
    """Batch mean of squared distances; returns ``(loss, d f_partial, d f_affined)``."""
    if f_partial.shape != f_affined.shape:
        raise ValueError(f"feature shape mismatch {f_partial.shape} vs {f_affined.shape}")
    b = f_partial.shape[0]
    diff = f_affined - f_partial
    loss = float((diff.astype(np.float64) ** 2).sum() / b)
    da = 2.0 * diff / b
    return loss, -da, da


class LossFlags(Protocol):
    use_id: bool
    use_tri: bool
    label_smooth: bool
    margin: float


@dataclass
class LossResult:
    total: float
    terms: dict[str, float]
    # kind -> (d logits, d feature)
    grads: dict[str, tuple[np.ndarray | None, np.ndarray]] = field(repr=False, default_factory=dict)


def total_loss(outputs: Mapping[str, ReidOutput], labels: Sequence[int], flags: LossFlags,
               detach_partial_in_stn: bool = False, smoothing: float = DEFAULT_SMOOTHING) -> LossResult:
    """Sum of the ReID loss on holistic, partial and affined features plus the alignment term.

    ``outputs`` maps ``"h"``, ``"p"``, ``"a"`` to extractor outputs that share
    ``labels``. Disabled terms are reported as exactly 0.
    """
    if not (flags.use_id or flags.use_tri):
        raise ValueError("at least one of use_id / use_tri must be enabled")
    eps = smoothing if flags.label_smooth else 0.0
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    grads = {}
    for k in KINDS:
        out = outputs[k]
        dlog = None
        dfeat = np.zeros_like(out.feature)
        if flags.use_id:
            if out.logits is None:
                raise ValueError("ID loss needs logits; the extractor has no classifier")
            terms[f"id_{k}"], dlog = id_loss(out.logits, labels, eps)
        if flags.use_tri:
            terms[f"tri_{k}"], dtri = adaptive_triplet_loss(out.feature, labels, flags.margin)
            dfeat += dtri
        grads[k] = (dlog, dfeat)
    terms["stn"], dp, da = stn_loss(outputs["p"].feature, outputs["a"].feature)
    if not detach_partial_in_stn:
        grads["p"][1][...] += dp
    grads["a"][1][...] += da
    total = 0.0
    for name in TERM_NAMES:
        total += terms[name]
    return LossResult(total, terms, grads)
