"""Basic blocks: declarative specs, layouts, exact parameter counts, and executable networks.

A basic block maps an image batch to one score row per sample. Two families
are provided: ``densenet_bc`` (three dense blocks of bottleneck layers with
compressing transitions) and ``plain_cnn`` (three conv stages, used for quick
tests).
"""

from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import BatchNormState, Tensor

FAMILIES = ("densenet_bc", "plain_cnn")


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class BasicBlockSpec:
    family: str = "densenet_bc"
    depth: int = 100
    growth: int = 12
    classes: int = 10
    input_shape: tuple = (3, 32, 32)
    compression: float = 0.5
    dropout: float = 0.0
    batchnorm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.family not in FAMILIES:
            raise LayoutError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.growth < 1:
            raise LayoutError(f"growth rate must be >= 1, got {self.growth}")
        if self.classes < 2:
            raise LayoutError(f"need at least 2 classes, got {self.classes}")
        if len(self.input_shape) != 3:
            raise LayoutError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if not 0.0 <= self.dropout < 1.0:
            raise LayoutError(f"dropout rate must lie in [0, 1), got {self.dropout}")
        if self.family == "densenet_bc":
            if self.depth < 10 or (self.depth - 4) % 6 != 0:
                raise LayoutError(f"densenet_bc depth must satisfy L = 4 (mod 6) and L >= 10, got L={self.depth}")
            if not 0.0 < self.compression <= 1.0:
                raise LayoutError(f"compression must lie in (0, 1], got {self.compression}")
            if not self.batchnorm:
                raise LayoutError("densenet_bc always uses batch normalization")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BasicBlockSpec":
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(d) - known)
        if unknown:
            raise LayoutError(f"unknown block spec key(s): {', '.join(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LayerDesc:
    kind: str
    name: str
    in_channels: int
    out_channels: int
    in_size: tuple
    out_size: tuple
    params: tuple = ()  # ((param name, shape), ...)

    @property
    def n_params(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.params)


@dataclass(frozen=True)
class BlockLayout:
    spec: BasicBlockSpec
    layers: tuple = field(default_factory=tuple)

    @property
    def counts(self) -> list:
        return [layer.n_params for layer in self.layers]

    @property
    def total(self) -> int:
        return sum(self.counts)

    def param_shapes(self) -> list:
        return [(f"{layer.name}.{pname}", shape) for layer in self.layers for pname, shape in layer.params]


def _bn(prefix: str, c: int) -> tuple:
    return ((f"{prefix}.gamma", (c,)), (f"{prefix}.beta", (c,)))


def densenet_layout(spec: BasicBlockSpec) -> BlockLayout:
    if spec.family != "densenet_bc":
        raise LayoutError(f"densenet_layout needs family densenet_bc, got {spec.family}")
    k = spec.growth
    n_layers = (spec.depth - 4) // 6
    cin, h, w = spec.input_shape
    size = (h, w)
    layers = []
    c = 2 * k
    layers.append(LayerDesc("conv", "stem", cin, c, size, size, (("conv", (c, cin, 3, 3)),)))
    for b in range(3):
        for i in range(n_layers):
            params = _bn("bn1", c) + (("conv1", (4 * k, c, 1, 1)),) + _bn("bn2", 4 * k) + (("conv2", (k, 4 * k, 3, 3)),)
            layers.append(LayerDesc("dense_layer", f"block{b + 1}.layer{i + 1}", c, c + k, size, size, params))
            c += k
        if b < 2:
            out = int(np.floor(spec.compression * c))
            if out < 1:
                raise LayoutError(f"transition {b + 1} compresses {c} channels to zero")
            new_size = (size[0] // 2, size[1] // 2)
            if min(new_size) < 1:
                raise LayoutError(f"input {spec.input_shape[1:]} too small for two 2x2 poolings")
            params = _bn("bn", c) + (("conv", (out, c, 1, 1)),)
            layers.append(LayerDesc("transition", f"trans{b + 1}", c, out, size, new_size, params))
            c, size = out, new_size
    params = _bn("bn", c) + (("fc.weight", (spec.classes, c)), ("fc.bias", (spec.classes,)))
    layers.append(LayerDesc("head", "head", c, spec.classes, size, (1, 1), params))
    return BlockLayout(spec, tuple(layers))


def plain_layout(spec: BasicBlockSpec) -> BlockLayout:
    if spec.family != "plain_cnn":
        raise LayoutError(f"plain_layout needs family plain_cnn, got {spec.family}")
    cin, h, w = spec.input_shape
    size = (h, w)
    layers = []
    c = cin
    for s, width in enumerate((spec.growth, 2 * spec.growth, 4 * spec.growth)):
        new_size = (size[0] // 2, size[1] // 2)
        if min(new_size) < 1:
            raise LayoutError(f"input {spec.input_shape[1:]} too small for three 2x2 poolings")
        params = (("conv", (width, c, 3, 3)),)
        if spec.batchnorm:
            params += _bn("bn", width)
        layers.append(LayerDesc("stage", f"stage{s + 1}", c, width, size, new_size, params))
        c, size = width, new_size
    params = (("fc.weight", (spec.classes, c)), ("fc.bias", (spec.classes,)))
    layers.append(LayerDesc("plain_head", "head", c, spec.classes, size, (1, 1), params))
    return BlockLayout(spec, tuple(layers))


def block_layout(spec: BasicBlockSpec) -> BlockLayout:
    if spec.family == "densenet_bc":
        return densenet_layout(spec)
    return plain_layout(spec)


def count_params(spec: BasicBlockSpec) -> int:
    """Exact number of trainable scalars (running BN statistics excluded)."""
    return block_layout(spec).total


class BasicBlock:
    """An executable basic block built from a layout.

    Parameters live in ``params`` (name -> Tensor) in layout order; batch-norm
    running statistics live in ``bn_states``. ``mode_audit`` counts batch-norm
    applications per mode so callers can confirm an evaluation ran in eval mode.
    """

    def __init__(self, layout: BlockLayout, params: dict, bn_states: dict):
        self.layout = layout
        self.spec = layout.spec
        self.params = params
        self.bn_states = bn_states
        self.mode_audit = Counter()
        self.bn_eps = 1e-5
        self.bn_momentum = 0.1

    def named_parameters(self) -> list:
        return list(self.params.items())

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def _bn(self, x: Tensor, prefix: str, train: bool) -> Tensor:
        self.mode_audit["train" if train else "eval"] += 1
        return T.batchnorm2d(
            x,
            self.params[f"{prefix}.gamma"],
            self.params[f"{prefix}.beta"],
            self.bn_states[prefix],
            train=train,
            eps=self.bn_eps,
            momentum=self.bn_momentum,
        )

    def forward(self, x: Tensor, train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
        if tuple(x.shape[1:]) != self.spec.input_shape:
            raise T.ShapeError(f"block expects input shape {self.spec.input_shape}, got {tuple(x.shape[1:])}")
        p = self.params
        rate = self.spec.dropout
        for layer in self.layout.layers:
            n = layer.name
            if layer.kind == "conv":
                x = T.conv2d(x, p[f"{n}.conv"], stride=1, pad=1)
            elif layer.kind == "dense_layer":
                y = T.relu(self._bn(x, f"{n}.bn1", train))
                y = T.dropout(T.conv2d(y, p[f"{n}.conv1"]), rate, rng, train)
                y = T.relu(self._bn(y, f"{n}.bn2", train))
                y = T.dropout(T.conv2d(y, p[f"{n}.conv2"], stride=1, pad=1), rate, rng, train)
                x = T.concat([x, y], axis=1)
            elif layer.kind == "transition":
                y = T.relu(self._bn(x, f"{n}.bn", train))
                y = T.dropout(T.conv2d(y, p[f"{n}.conv"]), rate, rng, train)
                x = T.avg_pool2d(y, 2)
            elif layer.kind == "head":
                y = T.global_avg_pool2d(T.relu(self._bn(x, f"{n}.bn", train)))
                x = T.linear(y, p[f"{n}.fc.weight"], p[f"{n}.fc.bias"])
            elif layer.kind == "stage":
                y = T.conv2d(x, p[f"{n}.conv"], stride=1, pad=1)
                if self.spec.batchnorm:
                    y = self._bn(y, f"{n}.bn", train)
                x = T.max_pool2d(T.relu(y), 2)
            elif layer.kind == "plain_head":
                x = T.linear(T.global_avg_pool2d(x), p[f"{n}.fc.weight"], p[f"{n}.fc.bias"])
            else:
                raise LayoutError(f"unknown layer kind {layer.kind!r}")
        return x

    __call__ = forward


def _init_param(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "gamma":
        return np.ones(shape)
    if leaf in ("beta", "bias"):
        return np.zeros(shape)
    if leaf == "weight":  # linear
        bound = 1.0 / np.sqrt(shape[1])
        return rng.uniform(-bound, bound, size=shape)
    # conv weight, He init over fan-out
    fan_out = shape[0] * shape[2] * shape[3]
    return rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)


def build_basic_block(spec: BasicBlockSpec, seed: int, dtype=np.float32) -> BasicBlock:
    """Instantiate a block with seed-deterministic initial parameters."""
    layout = block_layout(spec)
    rng = np.random.default_rng(seed)
    params = {}
    bn_states = {}
    for name, shape in layout.param_shapes():
        params[name] = Tensor(_init_param(name, shape, rng).astype(dtype), requires_grad=True)
        if name.endswith(".gamma"):
            bn_states[name[: -len(".gamma")]] = BatchNormState.initialized(shape[0], dtype=dtype)
    return BasicBlock(layout, params, bn_states)
