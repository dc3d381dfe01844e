"""Single- and two-stage training, checkpoints, configs and the confrontation matrix."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import (DatasetIndex, augment, generate_partials, load_dataset, make_partial_benchmark,
                   make_rng, pk_sample, synth_dataset)
from .evaluation import evaluate_protocol
from .nnops import Module, adam_step
from .reid import (DEFAULT_SMOOTHING, TERM_NAMES, Extractor, ExtractorSpec, adaptive_triplet_loss,
                   id_loss, total_loss)
from .stn import IDENTITY_THETA, STN
from .tensorio import load_named, save_named, tensor_to_text, text_to_tensor

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "lr"] + ["loss_total"] + [f"loss_{t}" for t in TERM_NAMES]


@dataclass
class TrainConfig:
    # Table II columns
    pt_warmstart: str | None = None
    label_smooth: bool = False
    use_id: bool = True
    use_tri: bool = False
    # optimisation
    margin: float = 0.3
    lr_initial: float = 2e-4
    lr_decayed: float = 2e-5
    decay_epoch: int = 15
    total_epochs: int = 30
    steps_per_epoch: int = 10  # PK batches per epoch; 0 means one pass over the images
    P: int = 8
    K: int = 4
    weight_decay: float = 5e-4
    stage: int = 1
    mode: str = "pm"
    seed: int = 0
    # partial generation and augmentation
    crop_removed_min: float = 0.2
    crop_removed_max: float = 0.6
    hflip: bool = True
    random_crop: bool = True
    partial_aug: bool = True
    stn_loss_detach_partial: bool = False
    # model and data
    extractor_channels: str = "16,32,64,128"
    image_height: int = 64
    image_width: int = 32
    data_dir: str | None = None
    synth_ids: int = 10
    synth_per_id: int = 6
    synth_seed: int = 0
    eval_metric: str = "euclidean"
    # evaluation set: held-out synthetic identities, a directory, or 0 ids for the training set
    eval_data_dir: str | None = None
    eval_synth_ids: int = 30
    eval_synth_per_id: int = 4
    eval_synth_seed: int = 1
    ckpt_every: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not (self.use_id or self.use_tri):
            raise ValueError("config must enable use_id or use_tri")
        if not self.decay_epoch < self.total_epochs:
            raise ValueError(f"decay_epoch ({self.decay_epoch}) must be < total_epochs ({self.total_epochs})")
        if self.P < 2 or self.K < 2:
            raise ValueError(f"P and K must be >= 2, got P={self.P} K={self.K}")
        if self.stage not in (1, 2):
            raise ValueError(f"stage must be 1 or 2, got {self.stage}")
        if self.mode not in ("pm", "mm"):
            raise ValueError(f"mode must be pm or mm, got {self.mode!r}")
        if not 0.0 <= self.crop_removed_min <= self.crop_removed_max < 1.0:
            raise ValueError("need 0 <= crop_removed_min <= crop_removed_max < 1")
        if self.eval_metric not in ("euclidean", "cosine"):
            raise ValueError(f"unknown eval_metric {self.eval_metric!r}")

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(int(c) for c in self.extractor_channels.split(","))

    @property
    def batch_size(self) -> int:
        return self.P * self.K

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if v is None else str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(name: str, raw: str, hint):
    raw = raw.strip()
    args = typing.get_args(hint)
    if args and type(None) in args:
        if raw.lower() in ("none", ""):
            return None
        hint = next(a for a in args if a is not type(None))
    if hint is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"{name}: expected a boolean, got {raw!r}")
    try:
        return hint(raw)
    except ValueError:
        raise ValueError(f"{name}: cannot parse {raw!r} as {hint.__name__}") from None


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Flat ``key = value`` lines, ``#`` comments; later keys win."""
    hints = typing.get_type_hints(TrainConfig)
    values = dataclasses.asdict(base) if base is not None else {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ValueError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _coerce(key, raw, hints[key])
    return TrainConfig(**values)


def load_config(paths: str | os.PathLike | Sequence[str | os.PathLike]) -> TrainConfig:
    if isinstance(paths, (str, os.PathLike)):
        paths = [paths]
    return parse_config_text("\n".join(Path(p).read_text(encoding="utf-8") for p in paths))


def lr_schedule(epoch: int, config: TrainConfig) -> float:
    return config.lr_initial if epoch < config.decay_epoch else config.lr_decayed


# Table II rows; "auto" asks the matrix runner to build the warm-start checkpoint
TABLE2 = {
    "Ep1": dict(pt_warmstart=None, label_smooth=False, use_id=True, use_tri=False),
    "Ep2": dict(pt_warmstart="auto", label_smooth=False, use_id=True, use_tri=False),
    "Ep3": dict(pt_warmstart="auto", label_smooth=True, use_id=True, use_tri=False),
    "Ep4": dict(pt_warmstart="auto", label_smooth=False, use_id=True, use_tri=True),
    "Ep5": dict(pt_warmstart="auto", label_smooth=True, use_id=True, use_tri=True),
}


def table2_config(row: str, base: TrainConfig | None = None) -> TrainConfig:
    return (base or TrainConfig()).replace(**TABLE2[row])


# ---------------------------------------------------------------------------
# model and checkpoints


class STNReID(Module):
    """STN + ReID extractor. ``stn`` may be None for a bare ReID model."""

    def __init__(self, stn: STN | None, reid: Extractor):
        self.stn = stn
        self.reid = reid

    @classmethod
    def build(cls, config: TrainConfig, num_ids: int, with_stn: bool = True) -> "STNReID":
        rng = make_rng(config.seed, 10)
        stn = STN(3, config.image_height, config.image_width, rng) if with_stn else None
        reid = Extractor(ExtractorSpec(config.channels, num_ids), make_rng(config.seed, 11))
        return cls(stn, reid)

    def _children(self):
        kids = [("reid", self.reid)]
        if self.stn is not None:
            kids.insert(0, ("stn", self.stn))
        return kids

    # Matcher interface (evaluation, eval-mode BN)
    def features(self, images: np.ndarray) -> np.ndarray:
        return self.reid.features(images)

    def affine(self, holistic: np.ndarray, partial: np.ndarray) -> np.ndarray:
        if self.stn is None:
            return holistic
        affined, _, _ = self.stn.forward(holistic, partial, train=False)
        return affined

    def theta(self, holistic: np.ndarray, partial: np.ndarray) -> np.ndarray:
        if self.stn is None:
            return np.tile(IDENTITY_THETA, (len(holistic), 1))
        theta, _ = self.stn.predict_theta(holistic, partial, train=False)
        return theta

    def without_stn(self) -> "STNReID":
        return STNReID(None, self.reid)


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    config_text: str = ""
    epoch: int = 0
    metrics: dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: STNReID, config: TrainConfig | None = None, epoch: int = 0,
                   metrics: dict[str, float] | None = None) -> "Checkpoint":
        tensors = {k: v.copy() for k, v in model.state_dict().items()}
        tensors["meta.image_size"] = np.array(
            [model.stn.height, model.stn.width] if model.stn is not None else [0, 0], np.float32)
        return cls(tensors, config.to_text() if config else "", epoch, dict(metrics or {}))

    def save(self, path: str | os.PathLike) -> None:
        out = dict(self.tensors)
        out["meta.config"] = text_to_tensor(self.config_text)
        out["meta.epoch"] = np.array([self.epoch], np.float32)
        for k, v in self.metrics.items():
            out[f"meta.metric.{k}"] = np.array([v], np.float32)
        save_named(path, out)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Checkpoint":
        raw = load_named(path)
        cfg = tensor_to_text(raw.pop("meta.config")) if "meta.config" in raw else ""
        epoch = int(raw.pop("meta.epoch")[0]) if "meta.epoch" in raw else 0
        metrics = {k[len("meta.metric."):]: float(raw.pop(k)[0]) for k in list(raw) if k.startswith("meta.metric.")}
        return cls(raw, cfg, epoch, metrics)

    def has_stn(self) -> bool:
        return any(k.startswith("stn.") for k in self.tensors)

    def has_reid(self) -> bool:
        return any(k.startswith("reid.") for k in self.tensors)

    def section(self, prefix: str) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def feature_dim(self) -> int:
        convs = sorted(k for k in self.tensors if k.startswith("reid.body.conv") and k.endswith(".weight"))
        if not convs:
            raise ValueError("checkpoint has no ReID extractor")
        return int(self.tensors[max(convs, key=lambda k: int(k.split("conv")[1].split(".")[0]))].shape[0])

    def to_model(self) -> STNReID:
        """Rebuild the network from tensor shapes alone."""
        stn = None
        if self.has_stn():
            h, w = (int(v) for v in self.tensors["meta.image_size"])
            stn = STN(3, h, w)
            stn.load_state_dict(self.tensors, "stn.")
        if not self.has_reid():
            raise ValueError("checkpoint has no ReID extractor")
        n_blocks = sum(1 for k in self.tensors if k.startswith("reid.body.conv") and k.endswith(".weight"))
        chans = tuple(int(self.tensors[f"reid.body.conv{i}.weight"].shape[0]) for i in range(1, n_blocks + 1))
        cls_w = self.tensors.get("reid.classifier.weight")
        spec = ExtractorSpec(chans, int(cls_w.shape[1]) if cls_w is not None else 1, cls_w is not None)
        reid = Extractor(spec)
        reid.load_state_dict(self.tensors, "reid.")
        return STNReID(stn, reid)


def merge_checkpoints(reid_ckpt: Checkpoint, stn_ckpt: Checkpoint) -> Checkpoint:
    """Frozen STN from one checkpoint, ReID extractor from another; no training."""
    if not stn_ckpt.has_stn():
        raise ValueError("STN checkpoint has no stn.* parameters")
    if not reid_ckpt.has_reid():
        raise ValueError("ReID checkpoint has no reid.* parameters")
    if stn_ckpt.has_reid() and stn_ckpt.feature_dim() != reid_ckpt.feature_dim():
        raise ValueError(f"feature dim mismatch: STN model trained with D={stn_ckpt.feature_dim()}, "
                         f"ReID model has D={reid_ckpt.feature_dim()}")
    tensors = {**stn_ckpt.section("stn."), **reid_ckpt.section("reid."),
               "meta.image_size": stn_ckpt.tensors["meta.image_size"]}
    return Checkpoint(tensors, reid_ckpt.config_text, reid_ckpt.epoch, dict(reid_ckpt.metrics))


# ---------------------------------------------------------------------------
# training


def _prepare_batch(dataset: DatasetIndex, config: TrainConfig, rng: np.random.Generator,
                   partial_aug: bool = False):
    batch = pk_sample(dataset, config.P, config.K, rng)
    imgs = np.stack([augment(im, rng, config.hflip, config.random_crop, partial_aug,
                             removed_min=config.crop_removed_min, removed_max=config.crop_removed_max)
                     for im in batch.images])
    return imgs.astype(np.float32), batch.labels


def _check_finite(loss, terms):
    if not np.isfinite(loss):
        dump = ", ".join(f"{k}={v:.6g}" for k, v in terms.items())
        raise FloatingPointError(f"non-finite training loss ({dump})")


def train_step(model: STNReID, holistic: np.ndarray, labels: np.ndarray, config: TrainConfig,
               rng: np.random.Generator, lr: float, t: int, stn_frozen: bool = False):
    """One joint step on a PK batch of holistic images; partials are cut on the fly.

    Returns the loss breakdown (total under ``"total"``).
    """
    partial, _ = generate_partials(holistic, rng, config.crop_removed_min, config.crop_removed_max)
    affined, _, stn_cache = model.stn.forward(holistic, partial, train=not stn_frozen)
    outs, caches = {}, {}
    for k, imgs in (("h", holistic), ("p", partial), ("a", affined)):
        outs[k], caches[k] = model.reid.forward(imgs, train=True)
    res = total_loss(outs, labels, config, detach_partial_in_stn=config.stn_loss_detach_partial)
    _check_finite(res.total, res.terms)
    for k in ("h", "p"):
        model.reid.backward(*res.grads[k], caches[k])
    daff = model.reid.backward(*res.grads["a"], caches["a"], need_dx=not stn_frozen)
    if not stn_frozen:
        model.stn.backward(daff, stn_cache)
    adam_step(model.parameters(), lr, weight_decay=config.weight_decay, t=t)
    return {"total": res.total, **res.terms}


def reid_step(model: STNReID, images: np.ndarray, labels: np.ndarray, config: TrainConfig,
              lr: float, t: int):
    """ReID loss on one batch, no STN (baseline and warm-start training)."""
    out, cache = model.reid.forward(images, train=True)
    terms = dict.fromkeys(TERM_NAMES, 0.0)
    dlog = dfeat = None
    if config.use_id:
        terms["id_h"], dlog = id_loss(out.logits, labels, DEFAULT_SMOOTHING if config.label_smooth else 0.0)
    if config.use_tri:
        terms["tri_h"], dfeat = adaptive_triplet_loss(out.feature, labels, config.margin)
    total = terms["id_h"] + terms["tri_h"]
    _check_finite(total, terms)
    model.reid.backward(dlog, dfeat, cache)
    adam_step(model.parameters(), lr, weight_decay=config.weight_decay, t=t)
    return {"total": total, **terms}


@dataclass
class TrainResult:
    model: STNReID
    checkpoint: Checkpoint
    history: list[dict[str, float]]


def _steps_per_epoch(dataset: DatasetIndex, config: TrainConfig) -> int:
    return config.steps_per_epoch or max(1, math.ceil(len(dataset) / config.batch_size))


def _run_epochs(model: STNReID, dataset: DatasetIndex, config: TrainConfig, step_fn,
                out_dir: str | os.PathLike | None, epochs: int | None = None) -> TrainResult:
    epochs = epochs or config.total_epochs
    rng = make_rng(config.seed, 20)
    steps = _steps_per_epoch(dataset, config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as f:
            csv.writer(f).writerow(METRICS_HEADER)
    history, t = [], 0
    for epoch in range(epochs):
        # the schedule is defined on the configured horizon; longer warm-start runs stay decayed
        lr = lr_schedule(min(epoch, config.total_epochs - 1), config)
        acc = dict.fromkeys(("total",) + TERM_NAMES, 0.0)
        for _ in range(steps):
            t += 1
            terms = step_fn(model, rng, lr, t)
            for k in acc:
                acc[k] += terms[k]
        row = {"epoch": epoch, "lr": lr, **{k: v / steps for k, v in acc.items()}}
        history.append(row)
        log.info("epoch %d lr %.1e loss %.4f", epoch, lr, row["total"])
        if out is not None:
            with open(out / "metrics.csv", "a", newline="") as f:
                csv.writer(f).writerow([epoch, f"{lr:.6g}", f"{row['total']:.9g}"]
                                       + [f"{row[t_]:.9g}" for t_ in TERM_NAMES])
            if config.ckpt_every and (epoch + 1) % config.ckpt_every == 0:
                Checkpoint.from_model(model, config, epoch + 1).save(out / f"ckpt_epoch_{epoch + 1}.stnt")
    ckpt = Checkpoint.from_model(model, config, epochs, {"loss_total": history[-1]["total"]})
    if out is not None:
        ckpt.save(out / f"ckpt_epoch_{epochs}.stnt")
        ckpt.save(out / "ckpt_final.stnt")
    return TrainResult(model, ckpt, history)


def _warm_start(model: STNReID, config: TrainConfig) -> None:
    if config.pt_warmstart:
        src = Checkpoint.load(config.pt_warmstart)
        reid = {k: v for k, v in src.section("reid.").items() if not k.startswith("reid.classifier")}
        for name, p in model.reid.named_parameters("reid."):
            if name in reid:
                if reid[name].shape != p.shape:
                    raise ValueError(f"warm-start {name}: shape {reid[name].shape} != {p.shape}")
                p.value = reid[name].astype(np.float32, copy=True)


def train_single_stage(dataset: DatasetIndex, config: TrainConfig,
                       out_dir: str | os.PathLike | None = None, model: STNReID | None = None) -> TrainResult:
    """End-to-end STN + ReID training with the full composite loss."""
    if model is None:
        model = STNReID.build(config, dataset.num_ids)
        _warm_start(model, config)

    def step(m, rng, lr, t):
        imgs, labels = _prepare_batch(dataset, config, rng)
        return train_step(m, imgs, labels, config, rng, lr, t)

    return _run_epochs(model, dataset, config, step, out_dir)


def train_stage1(dataset: DatasetIndex, config: TrainConfig,
                 out_dir: str | os.PathLike | None = None) -> TrainResult:
    """Joint training with a deliberately weak ReID module (ID loss only, random init)."""
    if config.use_tri or config.label_smooth or config.pt_warmstart or not config.use_id:
        log.warning("stage 1 is meant to run with a weak ReID (use_id only, no LS, no warm start)")
    return train_single_stage(dataset, config, out_dir)


def train_stage2_pm(dataset: DatasetIndex, stage1: Checkpoint, config: TrainConfig,
                    out_dir: str | os.PathLike | None = None) -> TrainResult:
    """Fine-tune a ReID module behind the frozen stage-1 STN (pipeline mode)."""
    if not stage1.has_stn():
        raise ValueError("stage-1 checkpoint has no stn.* parameters")
    model = STNReID.build(config, dataset.num_ids)
    model.stn.load_state_dict(stage1.tensors, "stn.")
    model.stn.freeze()
    _warm_start(model, config)

    def step(m, rng, lr, t):
        imgs, labels = _prepare_batch(dataset, config, rng)
        return train_step(m, imgs, labels, config, rng, lr, t, stn_frozen=True)

    return _run_epochs(model, dataset, config, step, out_dir)


def train_stage2_mm(reid_ckpt: Checkpoint, stn_ckpt: Checkpoint) -> Checkpoint:
    """Merge mode: no training, just composition."""
    return merge_checkpoints(reid_ckpt, stn_ckpt)


def train_reid_only(dataset: DatasetIndex, config: TrainConfig, out_dir: str | os.PathLike | None = None,
                    epochs: int | None = None) -> TrainResult:
    """A bare ReID model trained on holistic images with generated partials as augmentation."""
    model = STNReID.build(config, dataset.num_ids, with_stn=False)
    _warm_start(model, config)

    def step(m, rng, lr, t):
        imgs, labels = _prepare_batch(dataset, config, rng, partial_aug=config.partial_aug)
        return reid_step(m, imgs, labels, config, lr, t)

    return _run_epochs(model, dataset, config, step, out_dir, epochs)


# ---------------------------------------------------------------------------
# experiments


def resolve_dataset(config: TrainConfig) -> DatasetIndex:
    if config.data_dir:
        return load_dataset(config.data_dir, (config.image_height, config.image_width))
    return synth_dataset(config.synth_ids, config.synth_per_id, config.image_height,
                         config.image_width, seed=config.synth_seed)


@dataclass
class MatrixRow:
    name: str
    rank1_with_stn: float
    rank1_without_stn: float

    @property
    def improvement(self) -> float:
        return self.rank1_with_stn - self.rank1_without_stn


def pretrain_checkpoint(dataset: DatasetIndex, config: TrainConfig, path: str | os.PathLike) -> str:
    """Warm-start stand-in for ImageNet weights: ID-only ReID trained 3x the epoch budget."""
    pre_cfg = config.replace(pt_warmstart=None, use_id=True, use_tri=False, label_smooth=False)
    res = train_reid_only(dataset, pre_cfg, epochs=3 * config.total_epochs)
    res.checkpoint.save(path)
    return str(path)


def run_experiment_matrix(dataset: DatasetIndex, rows: Sequence[tuple[str, TrainConfig]],
                          eval_set: DatasetIndex | None = None, repeats: int = 10,
                          work_dir: str | os.PathLike | None = None, eval_seed: int = 0) -> list[MatrixRow]:
    """Train each row end to end and report rank-1 with and without the STN."""
    work = Path(work_dir) if work_dir is not None else None
    bench = make_partial_benchmark(eval_set if eval_set is not None else dataset, eval_seed)
    pre_paths: dict[int, str] = {}
    results = []
    for name, cfg in rows:
        if cfg.pt_warmstart == "auto":
            if cfg.seed not in pre_paths:
                if work is None:
                    raise ValueError("pt_warmstart=auto needs a work_dir for the warm-start checkpoint")
                work.mkdir(parents=True, exist_ok=True)
                pre_paths[cfg.seed] = pretrain_checkpoint(dataset, cfg, work / f"pretrain_seed{cfg.seed}.stnt")
            cfg = cfg.replace(pt_warmstart=pre_paths[cfg.seed])
        res = train_single_stage(dataset, cfg, work / name if work is not None else None)
        with_stn = evaluate_protocol(res.model, bench, repeats, eval_seed, use_stn=True, metric=cfg.eval_metric)
        without = evaluate_protocol(res.model, bench, repeats, eval_seed, use_stn=False, metric=cfg.eval_metric)
        results.append(MatrixRow(name, with_stn.rank1, without.rank1))
        log.info("%s: rank-1 %.3f with STN, %.3f without", name, with_stn.rank1, without.rank1)
    return results


def write_matrix_csv(rows: Iterable[MatrixRow], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["row", "rank1_with_stn", "rank1_without_stn", "improvement"])
        for r in rows:
            w.writerow([r.name, f"{r.rank1_with_stn:.6f}", f"{r.rank1_without_stn:.6f}", f"{r.improvement:+.6f}"])
