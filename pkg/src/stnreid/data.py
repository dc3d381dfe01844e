"""Partial-image synthesis, PK batching, augmentation and datasets.

Randomness always comes from ``numpy.random.Generator`` over PCG64, seeded
from a 64-bit integer; per-image streams are derived with ``SeedSequence``
so generation is order-independent and reproducible.
"""
from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .stn import affine_warp
from .tensorio import read_image, write_ppm

log = logging.getLogger(__name__)

DIRECTIONS = ("top", "bottom", "left", "right")
PALETTE_LEVELS = (0.1, 0.3, 0.5, 0.7, 0.9)
FILENAME_RE = re.compile(r"^(-?\d+)_c(\d+)")
IMAGE_EXTS = {".ppm", ".pnm", ".png", ".jpg", ".jpeg", ".bmp"}
# run manifests written next to generated datasets are not junk
IGNORED_NAMES = {"manifest.txt"}


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """PCG64 generator for ``seed``; extra integers select an independent substream."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & (2**64 - 1), *stream])))


# ---------------------------------------------------------------------------
# partial images


@dataclass(frozen=True)
class CropSpec:
    direction: str
    keep_fraction: float
    rect: tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)

    def theta(self, height: int, width: int) -> np.ndarray:
        """Affine parameters that sample exactly this crop, resized to the full frame."""
        return crop_theta(self.rect, height, width)


def crop_rect(direction: str, keep_fraction: float, height: int, width: int) -> tuple[int, int, int, int]:
    if direction not in DIRECTIONS:
        raise ValueError(f"unknown crop direction {direction!r}")
    if direction in ("top", "bottom"):
        keep = min(height, max(2, int(round(keep_fraction * height))))
        # removing the top keeps the bottom slab, and vice versa
        return (height - keep, height, 0, width) if direction == "top" else (0, keep, 0, width)
    keep = min(width, max(2, int(round(keep_fraction * width))))
    return (0, height, width - keep, width) if direction == "left" else (0, height, 0, keep)


def crop_theta(rect: Sequence[int], height: int, width: int) -> np.ndarray:
    r0, r1, c0, c1 = rect
    sx = (c1 - 1 - c0) / (width - 1)
    tx = (c0 + c1 - 1) / (width - 1) - 1.0
    sy = (r1 - 1 - r0) / (height - 1)
    ty = (r0 + r1 - 1) / (height - 1) - 1.0
    return np.array([sx, 0.0, tx, 0.0, sy, ty])


def _draw_crop(rng: np.random.Generator, h: int, w: int, removed_min: float, removed_max: float,
               direction: str | None = None, removed: float | None = None) -> CropSpec:
    if direction is None:
        direction = DIRECTIONS[int(rng.integers(4))]
    if removed is None:
        removed = float(rng.uniform(removed_min, removed_max))
    keep = 1.0 - removed
    return CropSpec(direction, keep, crop_rect(direction, keep, h, w))


def generate_partial(holistic: np.ndarray, rng: np.random.Generator, removed_min: float = 0.2,
                     removed_max: float = 0.6, direction: str | None = None,
                     removed: float | None = None) -> tuple[np.ndarray, CropSpec]:
    """Cut a slab off one side of ``holistic [1,C,H,W]`` and resize the rest back to H x W.

    The removed fraction is uniform in ``[removed_min, removed_max]`` and the
    kept slab spans the whole other axis.
    """
    squeeze = holistic.ndim == 3
    img = holistic[None] if squeeze else holistic
    _, _, h, w = img.shape
    if h < 16 or w < 16:
        raise ValueError(f"generate_partial needs H, W >= 16, got {h}x{w}")
    spec = _draw_crop(rng, h, w, removed_min, removed_max, direction, removed)
    theta = spec.theta(h, w)[None]
    out = affine_warp(img, np.repeat(theta, img.shape[0], axis=0))
    return (out[0] if squeeze else out), spec


def generate_partials(images: np.ndarray, rng: np.random.Generator, removed_min: float = 0.2,
                      removed_max: float = 0.6) -> tuple[np.ndarray, list[CropSpec]]:
    """Independent partial crop for every image of a ``[N,C,H,W]`` batch, in one resampling pass."""
    _, _, h, w = images.shape
    if h < 16 or w < 16:
        raise ValueError(f"generate_partial needs H, W >= 16, got {h}x{w}")
    specs = [_draw_crop(rng, h, w, removed_min, removed_max) for _ in range(len(images))]
    theta = np.stack([s.theta(h, w) for s in specs])
    return affine_warp(images, theta), specs


# ---------------------------------------------------------------------------
# augmentation


def hflip(image: np.ndarray) -> np.ndarray:
    return image[..., ::-1].copy()


def random_crop(image: np.ndarray, rng: np.random.Generator, pad: int = 10) -> np.ndarray:
    h, w = image.shape[-2:]
    widths = [(0, 0)] * (image.ndim - 2) + [(pad, pad), (pad, pad)]
    padded = np.pad(image, widths)
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    return padded[..., dy:dy + h, dx:dx + w].copy()


def augment(image: np.ndarray, rng: np.random.Generator, hflip_on: bool = False,
            random_crop_on: bool = False, partial_aug: bool = False, flip_prob: float = 0.5,
            partial_prob: float = 0.5, crop_pad: int = 10,
            removed_min: float = 0.2, removed_max: float = 0.6) -> np.ndarray:
    """Training augmentation for one ``[C,H,W]`` image; all flags off is the identity."""
    out = image
    if hflip_on and rng.random() < flip_prob:
        out = hflip(out)
    if random_crop_on:
        out = random_crop(out, rng, crop_pad)
    if partial_aug and rng.random() < partial_prob:
        out, _ = generate_partial(out, rng, removed_min, removed_max)
    return out


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DatasetIndex:
    images: np.ndarray             # [N,3,H,W] float32 in [0,1]
    pids: np.ndarray               # [N] contiguous person ids
    cams: np.ndarray               # [N]
    paths: list[str] | None = None
    raw_ids: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pids)

    @property
    def num_ids(self) -> int:
        return int(self.pids.max()) + 1 if len(self.pids) else 0

    @property
    def image_size(self) -> tuple[int, int]:
        return tuple(self.images.shape[2:])

    def by_id(self) -> list[np.ndarray]:
        return [np.flatnonzero(self.pids == i) for i in range(self.num_ids)]

    def subset(self, idx: Sequence[int], reindex: bool = False) -> "DatasetIndex":
        idx = np.asarray(idx)
        pids = self.pids[idx]
        if reindex:
            _, pids = np.unique(pids, return_inverse=True)
        paths = [self.paths[i] for i in idx] if self.paths else None
        return DatasetIndex(self.images[idx], pids.astype(np.int64), self.cams[idx], paths)

    def split_ids(self, first: int) -> tuple["DatasetIndex", "DatasetIndex"]:
        """Split into identities ``[0, first)`` and the rest, both reindexed from 0."""
        a = np.flatnonzero(self.pids < first)
        b = np.flatnonzero(self.pids >= first)
        return self.subset(a, reindex=True), self.subset(b, reindex=True)


@dataclass
class PKBatch:
    images: np.ndarray
    labels: np.ndarray
    indices: np.ndarray


def pk_sample(index: DatasetIndex, P: int, K: int, rng: np.random.Generator) -> PKBatch:
    """P distinct identities with K images each (with replacement when an ID has fewer)."""
    groups = index.by_id()
    if len(groups) < P:
        raise ValueError(f"PK sampling needs {P} identities, dataset has {len(groups)}")
    ids = rng.choice(len(groups), size=P, replace=False)
    chosen = []
    for pid in ids:
        members = groups[pid]
        chosen.append(rng.choice(members, size=K, replace=len(members) < K))
    idx = np.concatenate(chosen)
    return PKBatch(index.images[idx], index.pids[idx], idx)


def palette(num_ids: int) -> np.ndarray:
    """All level triples; any two differ by >= 0.2 in at least one channel."""
    levels = np.array(PALETTE_LEVELS, dtype=np.float32)
    grid = np.stack(np.meshgrid(levels, levels, levels, indexing="ij"), -1).reshape(-1, 3)
    if num_ids > len(grid):
        raise ValueError(f"at most {len(grid)} separable identities, asked for {num_ids}")
    return grid


@dataclass(frozen=True)
class Identity:
    base: np.ndarray                             # [3]
    stripes: tuple[tuple[int, int, int, int, np.ndarray], ...]  # (r0, r1, c0, c1, colour)


def _make_identity(rng: np.random.Generator, base: np.ndarray, colours: np.ndarray,
                   h: int, w: int) -> Identity:
    stripes = []
    n = int(rng.integers(2, 5))
    # stripe rows come from a coarse grid so placement is on integer pixels
    rows = np.sort(rng.choice(np.arange(1, 16), size=2 * n, replace=False)) * h // 16
    for k in range(n):
        r0, r1 = int(rows[2 * k]), int(rows[2 * k + 1])
        span = int(rng.integers(3))  # full width, left half, right half
        c0, c1 = ((w // 8, w - w // 8), (w // 8, w // 2), (w // 2, w - w // 8))[span]
        colour = colours[int(rng.integers(len(colours)))]
        stripes.append((r0, r1, c0, c1, colour))
    return Identity(base, tuple(stripes))


def _render(ident: Identity, rng: np.random.Generator, h: int, w: int, max_shift: int) -> np.ndarray:
    img = np.full((3, h, w), 0.5, dtype=np.float32) * rng.uniform(0.6, 1.0)
    body = (slice(h // 32, h - h // 32), slice(w // 8, w - w // 8))
    img[:, body[0], body[1]] = ident.base[:, None, None]
    for r0, r1, c0, c1, colour in ident.stripes:
        img[:, r0:r1, c0:c1] = colour[:, None, None]
    dy, dx = (int(v) for v in rng.integers(-max_shift, max_shift + 1, size=2))
    img = np.roll(img, (dy, dx), axis=(1, 2))
    img *= np.float32(rng.uniform(0.8, 1.2))
    img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
    return np.clip(img, 0.0, 1.0)


def synth_dataset(num_ids: int, imgs_per_id: int, height: int = 256, width: int = 128,
                  seed: int = 0, max_shift: int | None = None) -> DatasetIndex:
    """Procedural person images: per-ID base colour plus 2-4 'clothing' stripes.

    Per-image nuisance: brightness x[0.8, 1.2], integer translation up to
    ``max_shift`` px (8 px at 256 x 128, scaled with the height otherwise),
    Gaussian noise sigma 0.02.
    """
    if num_ids < 2 or imgs_per_id < 2:
        raise ValueError("synth_dataset needs num_ids >= 2 and imgs_per_id >= 2")
    pal = palette(num_ids)
    if max_shift is None:
        max_shift = max(1, round(8 * height / 256))
    rng = make_rng(seed)
    bases = pal[rng.permutation(len(pal))[:num_ids]]
    idents = [_make_identity(make_rng(seed, 1, i), bases[i], pal, height, width) for i in range(num_ids)]
    images = np.empty((num_ids * imgs_per_id, 3, height, width), dtype=np.float32)
    pids = np.repeat(np.arange(num_ids), imgs_per_id)
    cams = np.empty(len(pids), dtype=np.int64)
    for n in range(len(pids)):
        r = make_rng(seed, 2, n)
        images[n] = _render(idents[pids[n]], r, height, width, max_shift)
        cams[n] = int(r.integers(1, 7))
    return DatasetIndex(images, pids.astype(np.int64), cams, raw_ids=list(range(num_ids)))


def _resize(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if tuple(img.shape[1:]) == tuple(size):
        return img
    theta = np.array([[1, 0, 0, 0, 1, 0]], dtype=np.float64)
    return affine_warp(img[None], theta, *size)[0]


def load_dataset(dir_path: str | os.PathLike, size: tuple[int, int] | None = None) -> DatasetIndex:
    """Read ``<id>_c<cam>_<seq>.<ext>`` images; IDs are reindexed to 0..n-1 in sorted order.

    Images are resized to ``size`` (or to the first image's size) so they stack.
    """
    root = Path(dir_path)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    recs = []
    for path in sorted(root.iterdir()):
        if path.name in IGNORED_NAMES or path.is_dir():
            continue
        m = FILENAME_RE.match(path.name)
        if path.suffix.lower() not in IMAGE_EXTS or m is None:
            log.warning("skipping %s: name does not match <id>_c<cam>_<seq>.<ext>", path.name)
            continue
        raw_id, cam = int(m.group(1)), int(m.group(2))
        if raw_id < 0:
            log.warning("skipping %s: negative (distractor) id", path.name)
            continue
        recs.append((path, raw_id, cam))
    if not recs:
        raise ValueError(f"no usable images in {root}")
    imgs = [read_image(p) for p, _, _ in recs]
    size = size or tuple(imgs[0].shape[1:])
    images = np.stack([_resize(im, size) for im in imgs]).astype(np.float32)
    raw = np.array([r for _, r, _ in recs])
    uniq, pids = np.unique(raw, return_inverse=True)
    cams = np.array([c for _, _, c in recs])
    return DatasetIndex(images, pids.astype(np.int64), cams, [str(p) for p, _, _ in recs],
                        raw_ids=uniq.tolist())


def write_dataset(index: DatasetIndex, dir_path: str | os.PathLike) -> list[Path]:
    root = Path(dir_path)
    root.mkdir(parents=True, exist_ok=True)
    written, seq = [], {}
    for img, pid, cam in zip(index.images, index.pids, index.cams):
        n = seq.get(int(pid), 0)
        seq[int(pid)] = n + 1
        path = root / f"{int(pid) + 1:04d}_c{int(cam)}_{n:03d}.ppm"
        write_ppm(path, img)
        written.append(path)
    return written


# ---------------------------------------------------------------------------
# partial-vs-holistic evaluation sets


@dataclass
class PartialBenchmark:
    probes: np.ndarray            # partial images [Q,3,H,W]
    probe_ids: np.ndarray
    probe_specs: list[CropSpec]
    gallery: np.ndarray           # holistic candidates [G,3,H,W]
    gallery_ids: np.ndarray


def make_partial_benchmark(index: DatasetIndex, seed: int, removed_min: float = 0.2,
                           removed_max: float = 0.6) -> PartialBenchmark:
    """Per identity, half the images become partial probes and the rest holistic gallery candidates."""
    rng = make_rng(seed, 3)
    probes, pids, specs, gal, gids = [], [], [], [], []
    for pid, members in enumerate(index.by_id()):
        if len(members) < 2:
            raise ValueError(f"identity {pid} needs >= 2 images for a probe/gallery split")
        members = rng.permutation(members)
        half = len(members) // 2
        for i in members[:half]:
            part, spec = generate_partial(index.images[i:i + 1], rng, removed_min, removed_max)
            probes.append(part[0])
            pids.append(pid)
            specs.append(spec)
        for i in members[half:]:
            gal.append(index.images[i])
            gids.append(pid)
    return PartialBenchmark(np.stack(probes), np.array(pids), specs, np.stack(gal), np.array(gids))
