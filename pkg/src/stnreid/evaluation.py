"""Retrieval evaluation: pairwise STN scoring, CMC, repeated single-shot splits, timing."""
from __future__ import annotations

import csv
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .data import PartialBenchmark, make_rng
from .tensorio import write_ppm


class Matcher(Protocol):
    """What evaluation needs from a model."""

    def features(self, images: np.ndarray) -> np.ndarray: ...

    # ``partial`` is either paired with ``holistic`` or a single image shared by all of it
    def affine(self, holistic: np.ndarray, partial: np.ndarray) -> np.ndarray: ...


@dataclass
class DistanceMatrix:
    values: np.ndarray      # [Q, G]
    probe_ids: np.ndarray
    gallery_ids: np.ndarray

    def __post_init__(self):
        q, g = self.values.shape
        if len(self.probe_ids) != q or len(self.gallery_ids) != g:
            raise ValueError(f"distance matrix {self.values.shape} vs {len(self.probe_ids)} probes, "
                             f"{len(self.gallery_ids)} gallery ids")

    def columns(self, idx: Sequence[int]) -> "DistanceMatrix":
        idx = np.asarray(idx)
        return DistanceMatrix(self.values[:, idx], self.probe_ids, self.gallery_ids[idx])


def feature_distance(a: np.ndarray, b: np.ndarray, metric: str = "euclidean") -> np.ndarray:
    """Row-wise distances between paired features ``a[i]`` and ``b[i]`` (broadcasting)."""
    if metric == "euclidean":
        return np.sqrt(((a - b) ** 2).sum(axis=-1))
    if metric == "cosine":
        na = np.linalg.norm(a, axis=-1)
        nb = np.linalg.norm(b, axis=-1)
        return 1.0 - (a * b).sum(axis=-1) / np.maximum(na * nb, 1e-12)
    raise ValueError(f"unknown metric {metric!r}")


def score_pair_batch(model: Matcher, probe_partial: np.ndarray, gallery_holistics: np.ndarray,
                     probe_feature: np.ndarray | None = None, metric: str = "euclidean") -> np.ndarray:
    """Distances from one partial probe to N holistic images in one batched pass."""
    if probe_partial.ndim == 3:
        probe_partial = probe_partial[None]
    if probe_feature is None:
        probe_feature = model.features(probe_partial)[0]
    affined = model.affine(gallery_holistics, probe_partial)
    return feature_distance(probe_feature[None], model.features(affined), metric)


def score_stn(model: Matcher, probes: np.ndarray, probe_ids, gallery: np.ndarray, gallery_ids,
              chunk: int = 32, metric: str = "euclidean") -> DistanceMatrix:
    pf = model.features(probes)
    vals = np.empty((len(probes), len(gallery)), dtype=np.float64)
    for q in range(len(probes)):
        for s in range(0, len(gallery), chunk):
            vals[q, s:s + chunk] = score_pair_batch(model, probes[q:q + 1], gallery[s:s + chunk], pf[q], metric)
    return DistanceMatrix(vals, np.asarray(probe_ids), np.asarray(gallery_ids))


def score_no_stn(model: Matcher, probes: np.ndarray, probe_ids, gallery: np.ndarray, gallery_ids,
                 metric: str = "euclidean") -> DistanceMatrix:
    """STN bypassed: compare partial and holistic features directly."""
    pf = model.features(probes)
    gf = model.features(gallery)
    vals = feature_distance(pf[:, None, :], gf[None, :, :], metric).astype(np.float64)
    return DistanceMatrix(vals, np.asarray(probe_ids), np.asarray(gallery_ids))


def cmc(dist: DistanceMatrix, ranks: Sequence[int] = (1, 3, 5)) -> np.ndarray:
    """Fraction of probes with a same-ID gallery entry among the k nearest (ties by gallery index)."""
    pids, gids = np.asarray(dist.probe_ids), np.asarray(dist.gallery_ids)
    missing = np.setdiff1d(pids, gids)
    if missing.size:
        raise ValueError(f"probe ids {missing.tolist()} have no gallery entry")
    order = np.argsort(dist.values, axis=1, kind="stable")
    matches = gids[order] == pids[:, None]
    first = matches.argmax(axis=1)
    return np.array([(first < k).mean() for k in ranks])


@dataclass
class CmcReport:
    ranks: tuple[int, ...]
    per_repeat: np.ndarray          # [repeats, len(ranks)]
    mean: np.ndarray = field(init=False)
    std: np.ndarray = field(init=False)

    def __post_init__(self):
        self.per_repeat = np.asarray(self.per_repeat, dtype=np.float64)
        self.mean = self.per_repeat.mean(axis=0)
        self.std = self.per_repeat.std(axis=0)

    @property
    def num_repeats(self) -> int:
        return len(self.per_repeat)

    def accuracy(self, rank: int) -> float:
        return float(self.mean[list(self.ranks).index(rank)])

    @property
    def rank1(self) -> float:
        return self.accuracy(1)

    def write_csv(self, path: str | os.PathLike) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["rank", "accuracy_mean", "accuracy_std"])
            for r, m, s in zip(self.ranks, self.mean, self.std):
                w.writerow([r, f"{m:.6f}", f"{s:.6f}"])


def single_shot_splits(gallery_ids: np.ndarray, repeats: int, seed: int) -> list[np.ndarray]:
    """For each repeat, one uniformly chosen gallery column per identity."""
    rng = make_rng(seed, 4)
    ids = np.unique(gallery_ids)
    groups = [np.flatnonzero(gallery_ids == i) for i in ids]
    return [np.array([g[int(rng.integers(len(g)))] for g in groups]) for _ in range(repeats)]


def evaluate_distances(full: DistanceMatrix, repeats: int = 10, seed: int = 0,
                       ranks: Sequence[int] = (1, 3, 5)) -> CmcReport:
    rows = [cmc(full.columns(cols), ranks) for cols in single_shot_splits(full.gallery_ids, repeats, seed)]
    return CmcReport(tuple(ranks), np.array(rows))


def evaluate_protocol(model: Matcher, bench: PartialBenchmark, repeats: int = 10, seed: int = 0,
                      use_stn: bool = True, ranks: Sequence[int] = (1, 3, 5),
                      metric: str = "euclidean") -> CmcReport:
    """Mean CMC over ``repeats`` single-shot galleries, all partial images as probes."""
    score = score_stn if use_stn else score_no_stn
    full = score(model, bench.probes, bench.probe_ids, bench.gallery, bench.gallery_ids, metric=metric)
    return evaluate_distances(full, repeats, seed, ranks)


# ---------------------------------------------------------------------------
# throughput


@dataclass
class BenchRow:
    batch_size: int
    median_s: float
    per_pair_us: float


def identify(model: Matcher, probe: np.ndarray, gallery: np.ndarray, batch_size: int,
             metric: str = "euclidean") -> np.ndarray:
    """Full identification of one probe (its feature extraction included), gallery in chunks."""
    pf = model.features(probe[None] if probe.ndim == 3 else probe)[0]
    out = np.empty(len(gallery))
    for s in range(0, len(gallery), batch_size):
        out[s:s + batch_size] = score_pair_batch(model, probe, gallery[s:s + batch_size], pf, metric)
    return out


def bench_matching(model: Matcher, probe: np.ndarray, gallery: np.ndarray,
                   batch_sizes: Sequence[int] = (1, 2, 16, 32), repeats: int = 3) -> list[BenchRow]:
    if len(gallery) < max(batch_sizes):
        raise ValueError(f"gallery of {len(gallery)} smaller than batch size {max(batch_sizes)}")
    identify(model, probe, gallery[:max(batch_sizes)], max(batch_sizes))  # warm-up
    # repeats are interleaved over batch sizes so drift in machine load hits every N alike
    times = {n: [] for n in batch_sizes}
    for _ in range(repeats):
        for n in batch_sizes:
            t0 = time.perf_counter()
            identify(model, probe, gallery, n)
            times[n].append(time.perf_counter() - t0)
    rows = []
    for n in batch_sizes:
        med = float(np.median(times[n]))
        rows.append(BenchRow(int(n), med, med / len(gallery) * 1e6))
    return rows


def write_bench_csv(rows: Sequence[BenchRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["batch_size", "median_s", "per_pair_us"])
        for r in rows:
            w.writerow([r.batch_size, f"{r.median_s:.6f}", f"{r.per_pair_us:.3f}"])


def dump_top_affined(model: Matcher, bench: PartialBenchmark, out_dir: str | os.PathLike,
                     top: int = 5, max_probes: int = 8) -> list[Path]:
    """Write each probe with its top-ranked affined gallery crops, plus the best negative pair."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for q in range(min(max_probes, len(bench.probes))):
        probe = bench.probes[q:q + 1]
        d = score_pair_batch(model, probe, bench.gallery)
        order = np.argsort(d, kind="stable")
        path = out / f"probe{q:03d}.ppm"
        write_ppm(path, probe[0])
        written.append(path)
        negatives = [i for i in order if bench.gallery_ids[i] != bench.probe_ids[q]][:1]
        for rank, gi in enumerate(list(order[:top]) + negatives):
            aff = model.affine(bench.gallery[gi:gi + 1], probe)
            tag = "pos" if bench.gallery_ids[gi] == bench.probe_ids[q] else "neg"
            name = f"probe{q:03d}_rank{rank + 1}_{tag}.ppm" if rank < top else f"probe{q:03d}_hardneg.ppm"
            write_ppm(out / name, aff[0])
            written.append(out / name)
    return written
