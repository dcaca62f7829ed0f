"""Coupled ensembles: e basic blocks joined by a parameter-free fuse layer.

Training fuse modes (``train_fuse``):

- ``fc``: cross-entropy of the mean raw score vector.
- ``sm``: nll of the fused log-probabilities. ``sm_variant="logprob"`` averages
  log-softmax vectors; ``"prob"`` averages the probabilities themselves.
- ``ll``: mean of the per-branch nll losses.
- ``none``: e independent losses (summed, so each branch gets exactly its own
  gradient).

Prediction fuse modes (``predict_fuse``): ``individual``, ``fc`` (mean raw
scores) and ``sm`` (mean softmax probabilities).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import BasicBlock, BasicBlockSpec, block_layout, build_basic_block
from .params import ParamVector
from .tensor import Tensor

TRAIN_FUSES = ("fc", "sm", "ll", "none")
PREDICT_FUSES = ("individual", "fc", "sm")
SM_VARIANTS = ("logprob", "prob")

LOGIT_MAGIC = b"CELG"
LOGIT_VERSION = 1
_LOGIT_HEADER = struct.Struct("<4sIIII")


class FormatError(ValueError):
    pass


@dataclass
class CoupledEnsembleConfig:
    branches: list
    train_fuse: str = "sm"
    predict_fuse: str = "fc"
    sm_variant: str = "logprob"

    def __post_init__(self):
        if not self.branches:
            raise ValueError("a coupled ensemble needs at least one branch")
        if self.train_fuse not in TRAIN_FUSES:
            raise ValueError(f"train_fuse must be one of {TRAIN_FUSES}, got {self.train_fuse!r}")
        if self.predict_fuse not in PREDICT_FUSES:
            raise ValueError(f"predict_fuse must be one of {PREDICT_FUSES}, got {self.predict_fuse!r}")
        if self.sm_variant not in SM_VARIANTS:
            raise ValueError(f"sm_variant must be one of {SM_VARIANTS}, got {self.sm_variant!r}")
        classes = {s.classes for s in self.branches}
        if len(classes) != 1:
            raise ValueError(f"all branches must share one class count, got {sorted(classes)}")

    @property
    def e(self) -> int:
        return len(self.branches)

    @property
    def classes(self) -> int:
        return self.branches[0].classes

    @classmethod
    def homogeneous(cls, spec: BasicBlockSpec, e: int, **kw) -> "CoupledEnsembleConfig":
        if e < 1:
            raise ValueError(f"branch count must be >= 1, got {e}")
        return cls([spec] * e, **kw)

    def to_dict(self) -> dict:
        return {
            "branches": [s.to_dict() for s in self.branches],
            "train_fuse": self.train_fuse,
            "predict_fuse": self.predict_fuse,
            "sm_variant": self.sm_variant,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CoupledEnsembleConfig":
        d = dict(d)
        d["branches"] = [BasicBlockSpec.from_dict(b) for b in d["branches"]]
        return cls(**d)


# ---------------------------------------------------------------------------
# fuse layers


def _check_scores(scores: Sequence[Tensor]) -> None:
    if len(scores) == 0:
        raise ValueError("no branch scores to fuse")
    shape = scores[0].shape
    if len(shape) != 2:
        raise T.ShapeError(f"branch scores must be (batch, classes), got {shape}")
    for s in scores[1:]:
        if s.shape != shape:
            raise T.ShapeError(f"branch score shapes differ: {shape} vs {s.shape}")


def fuse_train(scores: Sequence[Tensor], targets, mode: str = "sm", variant: str = "logprob") -> Tensor:
    """Fused training loss over e branch score tensors of shape (batch, C)."""
    scores = list(scores)
    _check_scores(scores)
    e = len(scores)
    if mode == "fc":
        fused = T.mean(T.stack(scores), axis=0) if e > 1 else scores[0]
        return T.cross_entropy(fused, targets)
    if mode == "sm":
        logp = [T.log_softmax(s) for s in scores]
        if e == 1:
            return T.nll_loss(logp[0], targets)
        if variant == "logprob":
            return T.nll_loss(T.mean(T.stack(logp), axis=0), targets)
        if variant == "prob":
            log_mean_p = T.add(T.logsumexp(T.stack(logp), axis=0), -math.log(e))
            return T.nll_loss(log_mean_p, targets)
        raise ValueError(f"unknown sm variant {variant!r}")
    if mode == "ll":
        losses = [T.cross_entropy(s, targets) for s in scores]
        return T.mean(T.stack(losses), axis=0) if e > 1 else losses[0]
    if mode == "none":
        raise ValueError("train_fuse 'none' has no fused loss; use independent_loss")
    raise ValueError(f"unknown train fuse mode {mode!r}")


def independent_loss(scores: Sequence[Tensor], targets) -> Tensor:
    """Sum of per-branch losses; gradients reaching each branch are its standalone gradients."""
    scores = list(scores)
    _check_scores(scores)
    losses = [T.cross_entropy(s, targets) for s in scores]
    total = losses[0]
    for loss in losses[1:]:
        total = T.add(total, loss)
    return total


def training_loss(scores: Sequence[Tensor], targets, config: CoupledEnsembleConfig) -> tuple:
    """Returns (loss to differentiate, per-sample-mean loss value for logging)."""
    if config.train_fuse == "none":
        loss = independent_loss(scores, targets)
        return loss, float(loss.data) / len(scores)
    loss = fuse_train(scores, targets, config.train_fuse, config.sm_variant)
    return loss, float(loss.data)


@dataclass
class Prediction:
    scores: np.ndarray  # (N, C) fused, or (e, N, C) for individual
    labels: np.ndarray  # (N,) fused, or (e, N) for individual


def fuse_predict(scores: np.ndarray, mode: str = "fc") -> Prediction:
    """Fuse an (e, N, C) score array; argmax ties break toward the lowest class."""
    scores = np.asarray(scores)
    if scores.ndim != 3:
        raise T.ShapeError(f"score matrix must be (branches, samples, classes), got {scores.shape}")
    if mode == "fc":
        fused = scores.mean(axis=0)
    elif mode == "sm":
        fused = T.softmax_array(scores, axis=-1).mean(axis=0)
    elif mode == "individual":
        fused = scores
    else:
        raise ValueError(f"unknown predict fuse mode {mode!r}")
    return Prediction(fused, np.argmax(fused, axis=-1))


def error_rate(labels: np.ndarray, targets: np.ndarray) -> float:
    """Top-1 error in percent."""
    return 100.0 * float(np.mean(np.asarray(labels) != np.asarray(targets)))


# ---------------------------------------------------------------------------
# parameter pack / split


def expected_segments(config: CoupledEnsembleConfig) -> list:
    return [
        (i, name, shape)
        for i, spec in enumerate(config.branches)
        for name, shape in block_layout(spec).param_shapes()
    ]


def pack_params(branch_params: Sequence, dtype=None) -> ParamVector:
    """Concatenate per-branch ``[(name, array), ...]`` lists (or dicts) into one vector."""
    named = []
    for i, params in enumerate(branch_params):
        items = params.items() if isinstance(params, dict) else params
        named.extend((i, name, arr.data if isinstance(arr, Tensor) else arr) for name, arr in items)
    return ParamVector.from_arrays(named, dtype=dtype)


def split_params(W, config: CoupledEnsembleConfig) -> list:
    """Inverse of :func:`pack_params`: one ``{name: array}`` dict per branch.

    ``W`` may be a :class:`ParamVector` or a bare flat array laid out in the
    config's canonical segment order.
    """
    expected = expected_segments(config)
    total = sum(int(np.prod(shape)) for _, _, shape in expected)
    flat = W.W if isinstance(W, ParamVector) else np.asarray(W)
    if flat.size != total:
        raise ValueError(f"parameter vector length mismatch: expected {total} scalars, got {flat.size}")
    if isinstance(W, ParamVector):
        table = [(s.branch, s.name, s.length) for s in W.segments]
        if table != [(b, n, int(np.prod(s))) for b, n, s in expected]:
            raise ValueError("segment table does not match the ensemble config")
    out = [dict() for _ in config.branches]
    offset = 0
    for branch, name, shape in expected:
        n = int(np.prod(shape))
        out[branch][name] = flat[offset : offset + n].reshape(shape).copy()
        offset += n
    return out


# ---------------------------------------------------------------------------
# the composite model


class CoupledEnsemble:
    """e basic blocks whose parameters are views into one flat ``ParamVector``."""

    def __init__(self, config: CoupledEnsembleConfig, branches: list):
        self.config = config
        self.branches = branches
        self.params = pack_params([b.params for b in branches])
        for seg in self.params.segments:
            branches[seg.branch].params[seg.name].data = self.params.view(seg)

    @classmethod
    def build(cls, config: CoupledEnsembleConfig, seed: int, dtype=np.float32) -> "CoupledEnsemble":
        """Branch i is initialized exactly as a single block built with ``seed + i``."""
        return cls(config, [build_basic_block(spec, seed + i, dtype=dtype) for i, spec in enumerate(config.branches)])

    @property
    def e(self) -> int:
        return len(self.branches)

    @property
    def dtype(self):
        return self.params.W.dtype

    def forward(self, x, train: bool = False, rng: Optional[np.random.Generator] = None) -> list:
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        return [b.forward(x, train=train, rng=rng) for b in self.branches]

    __call__ = forward

    def tensors(self) -> list:
        return [self.branches[s.branch].params[s.name] for s in self.params.segments]

    def zero_grad(self) -> None:
        for t in self.tensors():
            t.grad = None

    def flat_grad(self) -> np.ndarray:
        parts = []
        for t in self.tensors():
            parts.append(t.grad.ravel() if t.grad is not None else np.zeros(t.data.size, dtype=self.dtype))
        return np.concatenate(parts).astype(self.dtype, copy=False)

    def scores(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Eval-mode raw scores, shape (e, N, C). Nothing is recorded on any tape."""
        before = [b.mode_audit["train"] for b in self.branches]
        chunks = []
        token = T._ACTIVE_TAPE.set(None)
        try:
            for start in range(0, len(images), batch_size):
                x = Tensor(np.asarray(images[start : start + batch_size], dtype=self.dtype))
                chunks.append(np.stack([s.data for s in self.forward(x, train=False)]))
        finally:
            T._ACTIVE_TAPE.reset(token)
        after = [b.mode_audit["train"] for b in self.branches]
        if before != after:
            raise RuntimeError("evaluation ran batch norm in train mode")
        return np.concatenate(chunks, axis=1)

    def predict(self, images: np.ndarray, mode: Optional[str] = None) -> Prediction:
        return fuse_predict(self.scores(images), mode or self.config.predict_fuse)

    # BN running statistics are buffers, not trainable parameters
    def buffers(self) -> list:
        out = []
        for i, b in enumerate(self.branches):
            for prefix, st in b.bn_states.items():
                out.append((i, f"{prefix}.running_mean", st.running_mean))
                out.append((i, f"{prefix}.running_var", st.running_var))
        return out

    def load_buffers(self, named: list) -> None:
        for i, name, arr in named:
            prefix, stat = name.rsplit(".", 1)
            st = self.branches[i].bn_states[prefix]
            setattr(st, stat, np.asarray(arr, dtype=self.dtype).copy())

    def load_params(self, W) -> None:
        if isinstance(W, ParamVector):
            table = [(s.branch, s.name, s.length) for s in W.segments]
            if table != [(s.branch, s.name, s.length) for s in self.params.segments]:
                raise ValueError("checkpoint segment table does not match the ensemble config")
        flat = W.W if isinstance(W, ParamVector) else np.asarray(W)
        if flat.size != self.params.W.size:
            raise ValueError(f"parameter vector length mismatch: expected {self.params.W.size} scalars, got {flat.size}")
        self.params.W[...] = flat


# ---------------------------------------------------------------------------
# logit files


def write_logits(path, scores: np.ndarray) -> None:
    """Write an (e, N, C) score array as a CELG file (payload ordered sample, branch, class)."""
    scores = np.asarray(scores, dtype="<f8")
    e, n, c = scores.shape
    with open(path, "wb") as f:
        f.write(_LOGIT_HEADER.pack(LOGIT_MAGIC, LOGIT_VERSION, n, c, e))
        f.write(np.ascontiguousarray(scores.transpose(1, 0, 2)).tobytes())


def read_logits(path) -> np.ndarray:
    """Read a CELG file into an (e, N, C) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _LOGIT_HEADER.size:
        raise FormatError(f"{path}: too short for a logit header")
    magic, version, n, c, e = _LOGIT_HEADER.unpack_from(raw)
    if magic != LOGIT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != LOGIT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _LOGIT_HEADER.size + 8 * n * c * e
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    data = np.frombuffer(raw, dtype="<f8", offset=_LOGIT_HEADER.size).reshape(n, e, c)
    return data.transpose(1, 0, 2).astype(np.float64)


def write_labels(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(np.asarray(labels, dtype="<u4").tobytes())


def read_labels(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise FormatError(f"{path}: label file length {len(raw)} is not a multiple of 4")
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


@dataclass
class FusedResult:
    prediction: Prediction
    error: float
    n_branches: int
    sources: list = field(default_factory=list)


def fuse_models(paths: Sequence, labels, mode: str = "fc") -> FusedResult:
    """Fuse several logit files, treating all their branches as one flat branch set."""
    if mode not in ("fc", "sm"):
        raise ValueError(f"model fusion supports 'fc' or 'sm', got {mode!r}")
    if not paths:
        raise ValueError("no logit files given")
    arrays = [read_logits(p) for p in paths]
    n, c = arrays[0].shape[1:]
    for p, a in zip(paths, arrays):
        if a.shape[1] != n:
            raise FormatError(f"{p}: {a.shape[1]} samples, expected {n}")
        if a.shape[2] != c:
            raise FormatError(f"{p}: {a.shape[2]} classes, expected {c}")
    if not isinstance(labels, np.ndarray):
        labels = read_labels(labels)
    if labels.shape != (n,):
        raise FormatError(f"labels hold {labels.size} entries, logit files hold {n} samples")
    stacked = np.concatenate(arrays, axis=0)
    pred = fuse_predict(stacked, mode)
    return FusedResult(pred, error_rate(pred.labels, labels), stacked.shape[0], [str(p) for p in paths])
