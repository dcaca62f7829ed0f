"""Flat parameter storage and the SGD update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class Segment:
    branch: int
    name: str
    offset: int
    length: int
    shape: tuple


@dataclass
class ParamVector:
    """All trainable scalars in one flat array ``W`` plus a segment table.

    Segments are disjoint, in table order, and cover ``W`` exactly.
    """

    W: np.ndarray
    segments: list = field(default_factory=list)

    def __post_init__(self):
        expected = 0
        for seg in self.segments:
            if seg.offset != expected:
                raise ValueError(f"segment {seg.branch}/{seg.name} starts at {seg.offset}, expected {expected}")
            if int(np.prod(seg.shape, dtype=np.int64)) != seg.length:
                raise ValueError(f"segment {seg.branch}/{seg.name}: shape {seg.shape} does not match length {seg.length}")
            expected += seg.length
        if expected != self.W.size:
            raise ValueError(f"segments cover {expected} scalars but W has {self.W.size}")

    def __len__(self) -> int:
        return self.W.size

    def view(self, seg: Segment) -> np.ndarray:
        return self.W[seg.offset : seg.offset + seg.length].reshape(seg.shape)

    def lookup(self, branch: int, name: str) -> Segment:
        for seg in self.segments:
            if seg.branch == branch and seg.name == name:
                return seg
        raise KeyError(f"no segment for branch {branch}, layer {name!r}")

    def branch_count(self) -> int:
        return len({s.branch for s in self.segments})

    @classmethod
    def from_arrays(cls, named: list, dtype=None) -> "ParamVector":
        """Pack ``[(branch, name, array), ...]`` in the given order."""
        segments = []
        offset = 0
        for branch, name, arr in named:
            arr = np.asarray(arr)
            segments.append(Segment(int(branch), name, offset, arr.size, tuple(arr.shape)))
            offset += arr.size
        if dtype is None:
            dtype = np.result_type(*[np.asarray(a).dtype for _, _, a in named]) if named else np.float32
        W = np.empty(offset, dtype=dtype)
        for seg, (_, _, arr) in zip(segments, named):
            W[seg.offset : seg.offset + seg.length] = np.asarray(arr).ravel()
        return cls(W, segments)


def sgd_step(
    params: ParamVector,
    grads: np.ndarray,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    velocity: Optional[np.ndarray] = None,
    nesterov: bool = False,
) -> ParamVector:
    """One in-place SGD update of ``params.W``.

    Heavy-ball form: ``g' = g + wd*w; v = mu*v + g'; w -= lr*v``. With
    ``nesterov`` the step is ``lr*(g' + mu*v)``. ``velocity`` is updated in
    place and is required whenever ``momentum`` is non-zero.
    """
    if lr < 0:
        raise ValueError(f"learning rate must be non-negative, got {lr}")
    grads = np.asarray(grads)
    if grads.shape != params.W.shape:
        raise ValueError(f"grads length {grads.size} != params length {params.W.size}")
    W = params.W
    g = grads.astype(W.dtype, copy=True)
    if weight_decay:
        g += W.dtype.type(weight_decay) * W
    if momentum:
        if velocity is None or velocity.shape != W.shape:
            raise ValueError("momentum > 0 needs a velocity buffer shaped like W")
        velocity *= W.dtype.type(momentum)
        velocity += g
        step = g + W.dtype.type(momentum) * velocity if nesterov else velocity
    else:
        step = g
    W -= W.dtype.type(lr) * step
    return params
