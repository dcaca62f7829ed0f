"""Training and evaluation loop for coupled ensembles.

Covers input normalization, crop/flip augmentation, the step learning-rate
schedule, micro-batch gradient accumulation, per-epoch evaluation and the
last-k final error metric.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import logging
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .checkpoint import write_checkpoint
from .data import LabeledImageSet
from .ensemble import CoupledEnsemble, CoupledEnsembleConfig, error_rate, fuse_predict, training_loss
from .params import sgd_step
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

RUNLOG_FORMAT = "coupled-ensembles-runlog/1"


class NonFiniteLossError(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, minibatch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class TrainConfig:
    ensemble: CoupledEnsembleConfig
    epochs: int = 300
    minibatch: int = 64
    microbatch: Optional[int] = None
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = False
    weight_decay: float = 1e-4
    milestones: tuple = (0.5, 0.75)
    decay: float = 0.1
    seed: int = 0
    init_seed: Optional[int] = None
    deterministic: bool = False
    augment: bool = True
    last_k: int = 10
    dtype: str = "float32"
    eval_batch: int = 256

    def __post_init__(self):
        self.milestones = tuple(float(m) for m in self.milestones)
        if self.microbatch is None:
            self.microbatch = self.minibatch
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.microbatch < 1 or self.minibatch % self.microbatch:
            raise ValueError(
                f"minibatch ({self.minibatch}) must be an integer multiple of microbatch ({self.microbatch})"
            )
        if not 1 <= self.last_k <= self.epochs:
            raise ValueError(f"last_k must lie in [1, epochs={self.epochs}], got {self.last_k}")
        if self.lr < 0:
            raise ValueError(f"learning rate must be non-negative, got {self.lr}")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def accumulation_steps(self) -> int:
        return self.minibatch // self.microbatch

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ensemble"] = self.ensemble.to_dict()
        d["milestones"] = list(self.milestones)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["ensemble"] = CoupledEnsembleConfig.from_dict(d["ensemble"])
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_error: float
    test_error: float
    branch_errors: list
    seconds: Optional[float] = None


@dataclass
class RunLog:
    header: dict
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {rec.epoch} does not follow epoch {self.records[-1].epoch}")
        if not 0.0 <= rec.test_error <= 100.0:
            raise ValueError(f"test error {rec.test_error} outside [0, 100]")
        self.records.append(rec)

    @property
    def test_errors(self) -> list:
        return [r.test_error for r in self.records]

    @property
    def train_losses(self) -> list:
        return [r.train_loss for r in self.records]

    def dumps(self) -> str:
        lines = [json.dumps({"format": RUNLOG_FORMAT, **self.header}, sort_keys=True)]
        lines += [json.dumps(asdict(r), sort_keys=True) for r in self.records]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str) -> "RunLog":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty run log")
        header = json.loads(lines[0])
        if header.pop("format", None) != RUNLOG_FORMAT:
            raise ValueError("not a coupled-ensembles run log")
        runlog = cls(header)
        for ln in lines[1:]:
            runlog.append(EpochRecord(**json.loads(ln)))
        return runlog

    @classmethod
    def read(cls, path) -> "RunLog":
        return cls.loads(Path(path).read_text())


# ---------------------------------------------------------------------------
# preprocessing


def channel_stats(images: np.ndarray) -> dict:
    x = np.asarray(images, dtype=np.float64)
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    if np.any(std == 0):
        bad = [int(c) for c in np.flatnonzero(std == 0)]
        raise ValueError(f"channel(s) {bad} have zero standard deviation on the training split")
    return {"mean": mean.tolist(), "std": std.tolist()}


def apply_normalization(dataset: LabeledImageSet, stats: dict, dtype=np.float32) -> LabeledImageSet:
    mean = np.asarray(stats["mean"])[None, :, None, None]
    std = np.asarray(stats["std"])[None, :, None, None]
    x = ((np.asarray(dataset.images, dtype=np.float64) - mean) / std).astype(dtype)
    return LabeledImageSet(x, dataset.labels, dataset.classes, dataset.split)


def normalize(train: LabeledImageSet, test: Optional[LabeledImageSet] = None, dtype=np.float32) -> tuple:
    """Per-channel standardization with statistics from the training split only.

    Returns ``(train_normalized, test_normalized_or_None, stats)``.
    """
    stats = channel_stats(train.images)
    test_n = apply_normalization(test, stats, dtype) if test is not None else None
    return apply_normalization(train, stats, dtype), test_n, stats


def crop_and_flip(image: np.ndarray, dy: int, dx: int, flip: bool, pad: int = 4) -> np.ndarray:
    """Zero-pad by ``pad``, take the window at offset (dy, dx), optionally mirror horizontally."""
    c, h, w = image.shape
    padded = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=image.dtype)
    padded[:, pad : pad + h, pad : pad + w] = image
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    """Random crop from the zero-padded image, then a horizontal flip with probability 1/2."""
    if image.shape[1] != image.shape[2]:
        raise ValueError(f"augment expects square images, got {image.shape[1:]}")
    dy, dx = rng.integers(0, 2 * pad + 1, size=2)
    flip = rng.random() < 0.5
    return crop_and_flip(image, int(dy), int(dx), bool(flip), pad)


def augment_batch(images: np.ndarray, rng, pad: int = 4) -> np.ndarray:
    return np.stack([augment(img, rng, pad) for img in images])


def lr_at(epoch: int, config: TrainConfig) -> float:
    passed = sum(1 for m in config.milestones if epoch >= m * config.epochs)
    return config.lr * config.decay**passed


def final_error(runlog, k: int) -> float:
    """Mean test error over the last ``k`` epochs."""
    errors = runlog.test_errors if isinstance(runlog, RunLog) else list(runlog)
    if not errors:
        raise ValueError("run log has no epochs")
    if not 1 <= k <= len(errors):
        raise ValueError(f"k must lie in [1, {len(errors)}], got {k}")
    return float(statistics.mean(errors[-k:]))


# ---------------------------------------------------------------------------
# training


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS to one thread so every reduction runs in a fixed order."""
    if not enabled:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=1):
        yield


def train_minibatch(
    model: CoupledEnsemble,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    lr: float,
    velocity: np.ndarray,
    drop_rng: Optional[np.random.Generator] = None,
    where: tuple = (0, 0),
) -> tuple:
    """Accumulate gradients over micro-batches, then take one SGD step.

    Each micro-batch loss is weighted by its share of the minibatch, so the
    accumulated gradient equals the full-minibatch gradient for models without
    batch statistics. Returns ``(mean loss, train-mode predicted labels)``.
    """
    n = len(labels)
    model.zero_grad()
    loss_sum = 0.0
    predicted = []
    pmode = config.ensemble.predict_fuse if config.ensemble.predict_fuse != "individual" else "fc"
    for start in range(0, n, config.microbatch):
        xb = images[start : start + config.microbatch]
        yb = labels[start : start + config.microbatch]
        with Tape() as tape:
            scores = model.forward(Tensor(xb), train=True, rng=drop_rng)
            loss, value = training_loss(scores, yb, config.ensemble)
            weighted = T.scale(loss, len(yb) / n)
        if not np.isfinite(value):
            raise NonFiniteLossError(where[0], where[1], value)
        T.backward(tape, weighted)
        loss_sum += value * len(yb)
        predicted.append(fuse_predict(np.stack([s.data for s in scores]), pmode).labels)
    sgd_step(
        model.params,
        model.flat_grad(),
        lr,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        velocity=velocity,
        nesterov=config.nesterov,
    )
    return loss_sum / n, np.concatenate(predicted)


def evaluate(model: CoupledEnsemble, dataset: LabeledImageSet, mode: str, batch_size: int = 256) -> tuple:
    """Eval-mode test error (%) under ``mode`` plus per-branch individual errors."""
    scores = model.scores(dataset.images, batch_size=batch_size)
    individual = [error_rate(lbl, dataset.labels) for lbl in fuse_predict(scores, "individual").labels]
    if mode == "individual":
        return float(np.mean(individual)), individual
    return error_rate(fuse_predict(scores, mode).labels, dataset.labels), individual


@dataclass
class TrainResult:
    runlog: RunLog
    model: CoupledEnsemble
    normalization: Optional[dict]
    timings: list


def train(
    config: TrainConfig,
    train_set: LabeledImageSet,
    test_set: LabeledImageSet,
    out_dir=None,
    header_extra: Optional[dict] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> TrainResult:
    """Run the full epoch loop.

    Raw 8-bit datasets are normalized with training-split statistics first;
    already-normalized float datasets are used as given. When ``out_dir`` is
    set, ``runlog.jsonl``, ``checkpoint.cepw`` and ``model.json`` are written
    there.
    """
    dtype = np.dtype(config.dtype)
    ens = config.ensemble
    if train_set.classes != ens.classes or test_set.classes != ens.classes:
        raise ValueError(f"ensemble predicts {ens.classes} classes, dataset has {train_set.classes}")
    stats = None
    if train_set.images.dtype == np.uint8:
        train_set, test_set, stats = normalize(train_set, test_set, dtype)
    else:
        train_set = LabeledImageSet(train_set.images.astype(dtype), train_set.labels, train_set.classes, "train")
        test_set = LabeledImageSet(test_set.images.astype(dtype), test_set.labels, test_set.classes, "test")

    shuffle_rng, aug_rng, drop_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(3))
    init_seed = config.seed if config.init_seed is None else config.init_seed

    with deterministic_mode(config.deterministic):
        model = CoupledEnsemble.build(ens, init_seed, dtype=dtype)
        header = {
            "config": config.to_dict(),
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "param_count": int(model.params.W.size),
            "normalization": stats,
            "bn_eps": model.branches[0].bn_eps,
            "bn_momentum": model.branches[0].bn_momentum,
        }
        header.update(header_extra or {})
        runlog = RunLog(header)
        velocity = np.zeros_like(model.params.W)
        timings = []
        n = len(train_set)
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            lr = lr_at(epoch, config)
            perm = shuffle_rng.permutation(n)
            loss_sum = 0.0
            wrong = 0
            for b, start in enumerate(range(0, n, config.minibatch)):
                idx = perm[start : start + config.minibatch]
                x = train_set.images[idx]
                if config.augment:
                    x = augment_batch(x, aug_rng)
                y = train_set.labels[idx]
                loss, pred = train_minibatch(model, x, y, config, lr, velocity, drop_rng, (epoch, b))
                loss_sum += loss * len(idx)
                wrong += int(np.sum(pred != y))
            test_err, branch_errs = evaluate(model, test_set, ens.predict_fuse, config.eval_batch)
            seconds = time.perf_counter() - t0
            timings.append(seconds)
            rec = EpochRecord(
                epoch=epoch,
                lr=lr,
                train_loss=loss_sum / n,
                train_error=100.0 * wrong / n,
                test_error=test_err,
                branch_errors=branch_errs,
                seconds=None if config.deterministic else seconds,
            )
            runlog.append(rec)
            log.info("epoch %d lr %.4g loss %.4f train %.2f%% test %.2f%%", epoch, lr, rec.train_loss, rec.train_error, test_err)
            if on_epoch is not None:
                on_epoch(rec)

    result = TrainResult(runlog, model, stats, timings)
    if out_dir is not None:
        save_run(result, out_dir)
    return result


def save_run(result: TrainResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.runlog.write(out / "runlog.jsonl")
    write_checkpoint(out / "checkpoint.cepw", result.model.params, result.model.buffers())
    meta = {
        "ensemble": result.model.config.to_dict(),
        "normalization": result.normalization,
        "dtype": str(result.model.dtype),
    }
    (out / "model.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if result.runlog.records and result.runlog.records[0].seconds is None:
        (out / "timing.json").write_text(json.dumps({"epoch_seconds": result.timings}) + "\n")
