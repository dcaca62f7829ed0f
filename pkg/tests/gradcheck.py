"""Central finite-difference gradient checking."""

import numpy as np

from coupled_ensembles import tensor as T


def numeric_grad(f, arr, step=1e-4, indices=None):
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (mutated in place, then restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        fp = float(f())
        flat[i] = orig - step
        fm = float(f())
        flat[i] = orig
        out[i] = (fp - fm) / (2 * step)
    return out.reshape(arr.shape)


def rel_error(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grads(build, tensors, step=1e-4, max_entries=None, seed=0):
    """Compare tape gradients of ``build()`` (returns a scalar Tensor) with central differences.

    Returns the worst relative error across ``tensors``. With ``max_entries``,
    only a random subset of coordinates per tensor is probed.
    """
    for t in tensors:
        t.grad = None
    with T.Tape() as tape:
        loss = build()
    T.backward(tape, loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def f():
        return build().data

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, a in zip(tensors, analytic):
        n = t.data.size
        if max_entries is not None and n > max_entries:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        num = numeric_grad(f, t.data, step, idx)
        worst = max(worst, rel_error(a.reshape(-1)[idx], num.reshape(-1)[idx]))
    return worst
