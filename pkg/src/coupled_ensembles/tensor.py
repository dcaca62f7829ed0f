"""Dense tensors with tape-based reverse-mode automatic differentiation.

Operations record themselves on the innermost active :class:`Tape`; with no
tape open they simply compute values. Gradients are produced by
:func:`backward`, which replays the tape in reverse and accumulates into the
``grad`` slot of every leaf tensor that requires gradients.

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = tensor_sum(w)
    backward(tape, loss)
    w.grad  # array([1., 1., 1.])
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    pass


class Tensor:
    """A dense n-dimensional array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "_produced")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._produced = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Used as a context manager; tapes nest and the innermost one records.
    """

    nodes: list = field(default_factory=list)
    _token: object = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)


_ACTIVE_TAPE: contextvars.ContextVar[Optional[Tape]] = contextvars.ContextVar(
    "active_tape", default=None
)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPE.get()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple, out_data: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = _ACTIVE_TAPE.get()
    if needs and tape is not None:
        out._produced = True
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Populate ``grad`` on every leaf reachable from ``loss`` through ``tape``.

    Gradients add into existing ``grad`` arrays; call ``zero_grad`` between
    optimizer steps.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        in_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if t._produced:
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
            elif t.grad is None:
                t.grad = np.array(gi, dtype=t.data.dtype, copy=True)
            else:
                t.grad += gi
    if not loss._produced and loss.requires_grad:
        # loss is itself a leaf
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "add",
        (a, b),
        a.data + b.data,
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _record(
        "mul",
        (a, b),
        a.data * b.data,
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(x: Tensor, factor: float) -> Tensor:
    factor = x.data.dtype.type(factor)
    return _record("scale", (x,), x.data * factor, lambda g: (g * factor,))


def tensor_sum(x: Tensor) -> Tensor:
    return _record("sum", (x,), np.sum(x.data), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor, axis: Optional[int] = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    out = np.mean(x.data, axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return _record("mean", (x,), out, grad_fn)


def reshape(x: Tensor, shape: tuple) -> Tensor:
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN, so a diverged activation still surfaces in the loss
    return _record("relu", (x,), np.maximum(x.data, x.dtype.type(0)), lambda g: (g * mask,))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = tuple(xs)
    out = np.stack([t.data for t in xs], axis=axis)

    def grad_fn(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return _record("stack", xs, out, grad_fn)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channels by default)."""
    xs = tuple(xs)
    out = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in xs])[:-1]
    return _record("concat", xs, out, lambda g: tuple(np.split(g, bounds, axis=axis)))


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input features {x.shape[-1]} != weight in_features {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data
        inputs = (x, weight, bias)
    else:
        inputs = (x, weight)

    def grad_fn(g):
        grads = [g @ weight.data, g.T @ x.data]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    return _record("linear", inputs, out, grad_fn)


def dropout(x: Tensor, rate: float, rng: Optional[np.random.Generator], train: bool = True) -> Tensor:
    """Inverted dropout: kept units are scaled by 1/(1 - rate)."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep).astype(x.dtype) / x.dtype.type(keep)
    return _record("dropout", (x,), x.data * mask, lambda g: (g * mask,))


# ---------------------------------------------------------------------------
# convolution and pooling


def conv2d(x: Tensor, weight: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Bias-free 2-D cross-correlation via im2col and a single GEMM."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if kh < 1 or kw < 1 or stride < 1:
        raise ShapeError("conv2d: kernel extents and stride must be >= 1")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise ShapeError(f"conv2d: padded input {h + 2 * pad}x{w + 2 * pad} smaller than kernel {kh}x{kw}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    w2 = weight.data.reshape(cout, -1)

    if kh == 1 and kw == 1 and stride == 1 and pad == 0:
        cols = x.data.transpose(1, 0, 2, 3).reshape(cin, -1)
        out = (w2 @ cols).reshape(cout, n, h, w).transpose(1, 0, 2, 3)

        def grad_fn(g):
            gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
            gx = (w2.T @ gm).reshape(cin, n, h, w).transpose(1, 0, 2, 3)
            gw = (gm @ cols.T).reshape(weight.shape)
            return np.ascontiguousarray(gx), gw

        return _record("conv2d", (x, weight), np.ascontiguousarray(out), grad_fn)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = np.empty((cin, kh, kw, n, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            win = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            cols[:, i, j] = win.transpose(1, 0, 2, 3)
    cols = cols.reshape(cin * kh * kw, -1)
    out = (w2 @ cols).reshape(cout, n, ho, wo).transpose(1, 0, 2, 3)

    def grad_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (gm @ cols.T).reshape(weight.shape)
        dcols = (w2.T @ gm).reshape(cin, kh, kw, n, ho, wo)
        gxp = np.zeros(xp.shape, dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad : pad + h, pad : pad + w] if pad else gxp
        return np.ascontiguousarray(gx), gw

    return _record("conv2d", (x, weight), np.ascontiguousarray(out), grad_fn)


def avg_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping average pooling; trailing rows/cols that do not fill a window are dropped."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"avg_pool2d: input {h}x{w} smaller than window {size}")
    crop = x.data[:, :, : ho * size, : wo * size]
    out = crop.reshape(n, c, ho, size, wo, size).mean(axis=(3, 5))
    inv = x.dtype.type(1.0 / (size * size))

    def grad_fn(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        up = np.repeat(np.repeat(g * inv, size, axis=2), size, axis=3)
        gx[:, :, : ho * size, : wo * size] = up
        return (gx,)

    return _record("avg_pool2d", (x,), out.astype(x.dtype), grad_fn)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; gradient goes to the first maximum of each window."""
    n, c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: input {h}x{w} smaller than window {size}")
    win = (
        x.data[:, :, : ho * size, : wo * size]
        .reshape(n, c, ho, size, wo, size)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, ho, wo, size * size)
    )
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        gwin = np.zeros(win.shape, dtype=x.dtype)
        np.put_along_axis(gwin, idx[..., None], g[..., None], axis=-1)
        gcrop = gwin.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * size, wo * size)
        gx = np.zeros(x.shape, dtype=x.dtype)
        gx[:, :, : ho * size, : wo * size] = gcrop
        return (gx,)

    return _record("max_pool2d", (x,), out, grad_fn)


def global_avg_pool2d(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    inv = x.dtype.type(1.0 / (h * w))

    def grad_fn(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], x.shape).copy(),)

    return _record("global_avg_pool2d", (x,), x.data.mean(axis=(2, 3)), grad_fn)


# ---------------------------------------------------------------------------
# batch normalization


@dataclass
class BatchNormState:
    """Running statistics for one batch-norm layer; ``None`` until initialized."""

    running_mean: Optional[np.ndarray] = None
    running_var: Optional[np.ndarray] = None

    @classmethod
    def initialized(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    """Per-channel batch normalization.

    Train mode uses the biased batch variance for normalization and folds the
    unbiased variance into the running estimate.
    """
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine params must have shape ({c},)")
    dt = x.dtype.type
    if train:
        m = n * h * w
        if m < 2:
            raise ShapeError("batchnorm2d in train mode needs at least 2 values per channel")
        mu = x.data.mean(axis=(0, 2, 3))
        xc = x.data - mu[None, :, None, None]
        var = (xc * xc).mean(axis=(0, 2, 3))
        if state.running_mean is None:
            state.running_mean = np.zeros(c, dtype=x.dtype)
            state.running_var = np.ones(c, dtype=x.dtype)
        state.running_mean[...] = (1 - momentum) * state.running_mean + momentum * mu
        state.running_var[...] = (1 - momentum) * state.running_var + momentum * var * (m / (m - 1))
        invstd = (1.0 / np.sqrt(var + dt(eps))).astype(x.dtype)
        xhat = xc * invstd[None, :, None, None]
        out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

        def grad_fn(g):
            gbeta = g.sum(axis=(0, 2, 3))
            ggamma = (g * xhat).sum(axis=(0, 2, 3))
            gxhat = g * gamma.data[None, :, None, None]
            s1 = gxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            s2 = (gxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (invstd[None, :, None, None] / dt(m)) * (dt(m) * gxhat - s1 - xhat * s2)
            return gx, ggamma, gbeta

        return _record("batchnorm2d", (x, gamma, beta), out, grad_fn)

    if state.running_mean is None or state.running_var is None:
        raise ValueError("batchnorm2d in eval mode with uninitialized running statistics")
    invstd = (1.0 / np.sqrt(state.running_var + dt(eps))).astype(x.dtype)
    mu = state.running_mean.astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None]) * invstd[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def grad_fn(g):
        return (
            g * (gamma.data * invstd)[None, :, None, None],
            (g * xhat).sum(axis=(0, 2, 3)),
            g.sum(axis=(0, 2, 3)),
        )

    return _record("batchnorm2d", (x, gamma, beta), out, grad_fn)


# ---------------------------------------------------------------------------
# probabilities and losses


def log_softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def softmax_array(x: np.ndarray, axis: int = -1) -> np.ndarray:
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 2:
        raise ShapeError("log_softmax needs at least 2 classes")
    out = log_softmax_array(x.data, axis=axis)
    p = np.exp(out)

    def grad_fn(g):
        return (g - p * np.sum(g, axis=axis, keepdims=True),)

    return _record("log_softmax", (x,), out, grad_fn)


def logsumexp(x: Tensor, axis: int = 0) -> Tensor:
    mx = np.max(x.data, axis=axis, keepdims=True)
    s = np.sum(np.exp(x.data - mx), axis=axis, keepdims=True)
    out = np.log(s) + mx
    weights = np.exp(x.data - out)

    def grad_fn(g):
        return (np.expand_dims(g, axis) * weights,)

    return _record("logsumexp", (x,), np.squeeze(out, axis=axis), grad_fn)


def nll_loss(logprobs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise log-probabilities."""
    targets = np.asarray(targets)
    n, c = logprobs.shape
    if targets.shape != (n,):
        raise ShapeError(f"nll_loss: expected {n} targets, got shape {targets.shape}")
    if np.any(targets < 0) or np.any(targets >= c):
        raise ValueError(f"nll_loss: targets must lie in [0, {c})")
    rows = np.arange(n)
    out = -np.mean(logprobs.data[rows, targets])

    def grad_fn(g):
        gx = np.zeros(logprobs.shape, dtype=logprobs.dtype)
        gx[rows, targets] = -g / n
        return (gx,)

    return _record("nll_loss", (logprobs,), np.asarray(out, dtype=logprobs.dtype), grad_fn)


def cross_entropy(scores: Tensor, targets) -> Tensor:
    return nll_loss(log_softmax(scores), targets)
