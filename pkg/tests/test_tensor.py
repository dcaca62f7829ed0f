import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from coupled_ensembles import tensor as T
from coupled_ensembles.tensor import BatchNormState, ShapeError, Tensor

from gradcheck import check_grads


def leaf(arr):
    return Tensor(np.array(arr, dtype=np.float64), requires_grad=True)


def direct_conv(x, w, stride, pad):
    n, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    for b in range(n):
        for o in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, c, i * stride + u, j * stride + v] * w[o, c, u, v]
                    out[b, o, i, j] = acc
    return out


# ---------------------------------------------------------------- conv2d


def test_conv_zero_input_gives_zero():
    x = Tensor(np.zeros((1, 3, 5, 5)))
    w = Tensor(np.random.default_rng(0).normal(size=(4, 3, 3, 3)))
    assert np.all(T.conv2d(x, w, pad=1).data == 0)


def test_conv_ones_kernel_center_pixel():
    x = np.arange(25, dtype=np.float64).reshape(1, 1, 5, 5)
    out = T.conv2d(Tensor(x), Tensor(np.ones((1, 1, 3, 3))), pad=1).data
    assert out[0, 0, 2, 2] == pytest.approx(x[0, 0, 1:4, 1:4].sum())


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 1)])
def test_conv_matches_nested_loops(stride, pad, k):
    rng = np.random.default_rng(stride * 10 + pad + k)
    x = rng.normal(size=(2, 3, 6, 7))
    w = rng.normal(size=(4, 3, k, k))
    out = T.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad).data
    np.testing.assert_allclose(out, direct_conv(x, w, stride, pad), rtol=1e-10, atol=1e-10)


def test_conv_output_shape():
    x = Tensor(np.zeros((2, 12, 32, 32), np.float32))
    w = Tensor(np.zeros((24, 12, 3, 3), np.float32))
    assert T.conv2d(x, w, pad=1).shape == (2, 24, 32, 32)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        T.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


# ---------------------------------------------------------------- batchnorm


def fresh_affine(c):
    return Tensor(np.ones(c)), Tensor(np.zeros(c))


def test_bn_already_normalized_channel():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 1, 4, 4))
    x = (x - x.mean()) / x.std()
    g, b = fresh_affine(1)
    out = T.batchnorm2d(Tensor(x), g, b, BatchNormState(), train=True)
    assert np.max(np.abs(out.data - x)) < 1e-4


def test_bn_constant_channel_goes_to_zero():
    g, b = fresh_affine(2)
    out = T.batchnorm2d(Tensor(np.full((3, 2, 2, 2), 7.5)), g, b, BatchNormState(), train=True)
    assert np.max(np.abs(out.data)) < 1e-3


def test_bn_matches_direct_statistics():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(4, 3, 2, 2))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    out = T.batchnorm2d(Tensor(x), Tensor(gamma), Tensor(beta), BatchNormState(), train=True).data
    for c in range(3):
        vals = x[:, c].ravel()
        mu = sum(vals) / len(vals)
        var = sum((v - mu) ** 2 for v in vals) / len(vals)
        expect = gamma[c] * (x[:, c] - mu) / math.sqrt(var + 1e-5) + beta[c]
        np.testing.assert_allclose(out[:, c], expect, rtol=1e-12, atol=1e-12)


def test_bn_running_statistics_update():
    rng = np.random.default_rng(3)
    x = rng.normal(2.0, 3.0, size=(5, 2, 3, 3))
    state = BatchNormState.initialized(2, np.float64)
    g, b = fresh_affine(2)
    T.batchnorm2d(Tensor(x), g, b, state, train=True)
    mu = x.mean(axis=(0, 2, 3))
    var_unbiased = x.var(axis=(0, 2, 3), ddof=1)
    np.testing.assert_allclose(state.running_mean, 0.1 * mu)
    np.testing.assert_allclose(state.running_var, 0.9 + 0.1 * var_unbiased)


def test_bn_eval_uses_running_statistics():
    state = BatchNormState(np.array([1.0, -1.0]), np.array([4.0, 0.25]))
    x = np.random.default_rng(4).normal(size=(2, 2, 2, 2))
    g, b = fresh_affine(2)
    out = T.batchnorm2d(Tensor(x), g, b, state, train=False).data
    np.testing.assert_allclose(out[:, 0], (x[:, 0] - 1.0) / np.sqrt(4.0 + 1e-5))
    np.testing.assert_allclose(out[:, 1], (x[:, 1] + 1.0) / np.sqrt(0.25 + 1e-5))


def test_bn_eval_uninitialized_raises():
    g, b = fresh_affine(1)
    with pytest.raises(ValueError):
        T.batchnorm2d(Tensor(np.zeros((2, 1, 2, 2))), g, b, BatchNormState(), train=False)


def test_bn_train_needs_two_values():
    g, b = fresh_affine(1)
    with pytest.raises(ShapeError):
        T.batchnorm2d(Tensor(np.zeros((1, 1, 1, 1))), g, b, BatchNormState(), train=True)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (4, 3, 3, 3), elements=st.floats(-50, 50)),
    arrays(np.float64, (3,), elements=st.floats(-3, 3)),
)
def test_bn_train_output_moments(x, beta):
    spread = x.std(axis=(0, 2, 3))
    if np.any(spread < 0.5):
        return  # degenerate channels are covered by the constant-channel test
    g = Tensor(np.ones(3))
    out = T.batchnorm2d(Tensor(x), g, Tensor(beta), BatchNormState(), train=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), beta, atol=1e-5)
    centered = out - beta[None, :, None, None]
    np.testing.assert_allclose(centered.var(axis=(0, 2, 3)), 1.0, atol=1e-3)


# ---------------------------------------------------------------- log_softmax / nll


def test_log_softmax_uniform():
    out = T.log_softmax(Tensor(np.zeros((1, 4)))).data
    np.testing.assert_allclose(out, -math.log(4) * np.ones((1, 4)))


def test_log_softmax_shift():
    v = np.array([[0.3, -1.2, 2.5, 0.0]])
    np.testing.assert_allclose(
        T.log_softmax(Tensor(v)).data, T.log_softmax(Tensor(v + 10)).data, atol=1e-12
    )


def test_log_softmax_high_precision():
    mpmath.mp.dps = 50
    row = [1, 2, 3]
    lse = mpmath.log(sum(mpmath.exp(mpmath.mpf(v)) for v in row))
    expect = np.array([float(mpmath.mpf(v) - lse) for v in row])
    out = T.log_softmax(Tensor(np.array([row], dtype=np.float64))).data[0]
    np.testing.assert_allclose(out, expect, rtol=0, atol=1e-15)


def test_log_softmax_needs_two_classes():
    with pytest.raises(ShapeError):
        T.log_softmax(Tensor(np.zeros((3, 1))))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(2, 12)), elements=st.floats(-30, 30)),
    st.floats(-100, 100),
)
def test_log_softmax_rows(x, shift):
    out = T.log_softmax(Tensor(x)).data
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1.0, atol=1e-6)
    shifted = T.log_softmax(Tensor(x + shift)).data
    assert np.max(np.abs(out - shifted)) < 1e-9 * max(1.0, abs(shift))


def test_nll_uniform():
    lp = Tensor(np.full((3, 5), -math.log(5)))
    assert T.nll_loss(lp, [0, 2, 4]).item() == pytest.approx(math.log(5))


def test_nll_certainty():
    lp = Tensor(np.array([[0.0, -np.inf]]))
    assert T.nll_loss(lp, [0]).item() == 0.0


def test_nll_direct_sum():
    rng = np.random.default_rng(5)
    lp = T.log_softmax_array(rng.normal(size=(5, 10)))
    t = rng.integers(0, 10, size=5)
    total = 0.0
    for r in range(5):
        total += lp[r, t[r]]
    assert T.nll_loss(Tensor(lp), t).item() == pytest.approx(-total / 5, rel=1e-14)


@pytest.mark.parametrize("bad", [[0, 3], [-1, 0]])
def test_nll_target_out_of_range(bad):
    with pytest.raises(ValueError):
        T.nll_loss(Tensor(np.zeros((2, 3))), bad)


# ---------------------------------------------------------------- backward


def test_backward_sum_gives_ones():
    w = leaf(np.arange(6.0).reshape(2, 3))
    with T.Tape() as tape:
        loss = T.tensor_sum(w)
    T.backward(tape, loss)
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))


def test_backward_independent_parameter_is_zero():
    w = leaf(np.ones(4))
    x = leaf(np.arange(4.0))
    with T.Tape() as tape:
        loss = T.tensor_sum(T.add(x, T.mul(w, 0.0)))
    T.backward(tape, loss)
    np.testing.assert_array_equal(w.grad, np.zeros(4))


def test_backward_accumulates_across_uses():
    w = leaf([1.0, -2.0, 3.0])
    with T.Tape() as tape:
        loss = T.tensor_sum(T.add(T.mul(w, w), w))
    T.backward(tape, loss)
    np.testing.assert_allclose(w.grad, 2 * w.data + 1)


def test_backward_adds_into_existing_grad():
    w = leaf([1.0, 2.0])
    for _ in range(2):
        with T.Tape() as tape:
            loss = T.tensor_sum(w)
        T.backward(tape, loss)
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    w = leaf(np.ones(3))
    with T.Tape() as tape:
        out = T.relu(w)
    with pytest.raises(ShapeError):
        T.backward(tape, out)


def test_no_tape_records_nothing():
    w = leaf(np.ones(3))
    tape = T.Tape()
    T.tensor_sum(w)
    assert len(tape) == 0 and T.active_tape() is None


def test_tape_determinism():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(4, 3, 6, 6)))
    w = leaf(rng.normal(size=(5, 3, 3, 3)))
    fc = leaf(rng.normal(size=(2, 5)))
    grads = []
    for _ in range(2):
        w.grad = fc.grad = None
        with T.Tape() as tape:
            h = T.relu(T.conv2d(x, w, pad=1))
            loss = T.cross_entropy(T.linear(T.global_avg_pool2d(h), fc), [0, 1, 1, 0])
        T.backward(tape, loss)
        grads.append((w.grad.tobytes(), fc.grad.tobytes()))
    assert grads[0] == grads[1]


# ---------------------------------------------------------------- finite differences

RNG = np.random.default_rng(123)


def _r(*shape):
    return leaf(RNG.normal(size=shape))


def _weighted(out, seed=0):
    # random projection so every output coordinate contributes
    wts = np.random.default_rng(seed).normal(size=out.shape)
    return T.tensor_sum(T.mul(out, wts))


def _cases():
    a, b, bb = _r(3, 4), _r(3, 4), _r(1, 4)
    s = _r(2, 3, 4)
    x4 = _r(2, 3, 5, 5)
    wconv, w1x1 = _r(4, 3, 3, 3), _r(2, 3, 1, 1)
    lin_w, lin_b, lin_x = _r(5, 4), _r(5), _r(3, 4)
    bn_x, bn_g, bn_b = _r(3, 2, 3, 3), _r(2), _r(2)
    pool_x = leaf(RNG.permutation(2 * 2 * 4 * 4).reshape(2, 2, 4, 4) * 0.1)
    sc = _r(4, 6)
    lse_x = _r(3, 4, 5)
    mask_rng_seed = 9
    eval_state = BatchNormState(RNG.normal(size=2), RNG.uniform(0.5, 2, size=2))
    return {
        "add": (lambda: _weighted(T.add(a, b)), [a, b]),
        "add_broadcast": (lambda: _weighted(T.add(a, bb)), [a, bb]),
        "mul": (lambda: _weighted(T.mul(a, b)), [a, b]),
        "mul_broadcast": (lambda: _weighted(T.mul(a, bb)), [a, bb]),
        "scale": (lambda: _weighted(T.scale(a, -2.5)), [a]),
        "sum": (lambda: T.tensor_sum(T.mul(a, a)), [a]),
        "mean_all": (lambda: T.mean(T.mul(s, s)), [s]),
        "mean_axis": (lambda: _weighted(T.mean(s, axis=1)), [s]),
        "reshape": (lambda: _weighted(T.reshape(s, (6, 4))), [s]),
        "relu": (lambda: _weighted(T.relu(a)), [a]),
        "stack": (lambda: _weighted(T.stack([a, b], axis=0)), [a, b]),
        "concat": (lambda: _weighted(T.concat([x4, T.scale(x4, 2.0)], axis=1)), [x4]),
        "linear": (lambda: _weighted(T.linear(lin_x, lin_w, lin_b)), [lin_x, lin_w, lin_b]),
        "conv3x3_pad1": (lambda: _weighted(T.conv2d(x4, wconv, pad=1)), [x4, wconv]),
        "conv3x3_stride2": (lambda: _weighted(T.conv2d(x4, wconv, stride=2)), [x4, wconv]),
        "conv1x1": (lambda: _weighted(T.conv2d(x4, w1x1)), [x4, w1x1]),
        "avg_pool": (lambda: _weighted(T.avg_pool2d(pool_x)), [pool_x]),
        "max_pool": (lambda: _weighted(T.max_pool2d(pool_x)), [pool_x]),
        "global_avg_pool": (lambda: _weighted(T.global_avg_pool2d(x4)), [x4]),
        "batchnorm_train": (
            lambda: _weighted(T.batchnorm2d(bn_x, bn_g, bn_b, BatchNormState(), train=True)),
            [bn_x, bn_g, bn_b],
        ),
        "batchnorm_eval": (
            lambda: _weighted(T.batchnorm2d(bn_x, bn_g, bn_b, eval_state, train=False)),
            [bn_x, bn_g, bn_b],
        ),
        "dropout": (
            lambda: _weighted(T.dropout(a, 0.3, np.random.default_rng(mask_rng_seed), train=True)),
            [a],
        ),
        "log_softmax": (lambda: _weighted(T.log_softmax(sc)), [sc]),
        "logsumexp": (lambda: _weighted(T.logsumexp(lse_x, axis=0)), [lse_x]),
        "nll_loss": (lambda: T.nll_loss(T.log_softmax(sc), [0, 5, 2, 2]), [sc]),
        "cross_entropy": (lambda: T.cross_entropy(sc, [1, 1, 3, 0]), [sc]),
    }


CASES = _cases()


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_double_precision(name):
    build, tensors = CASES[name]
    assert check_grads(build, tensors) < 1e-4


@pytest.mark.parametrize("name", ["conv3x3_pad1", "linear", "batchnorm_train", "log_softmax", "avg_pool"])
def test_gradient_single_precision(name):
    build, tensors = CASES[name]
    originals = [t.data for t in tensors]
    try:
        for t in tensors:
            t.data = t.data.astype(np.float32)
        assert check_grads(build, tensors, step=1e-2) < 1e-2
    finally:
        for t, d in zip(tensors, originals):
            t.data = d


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_gradient_random_composite_graph(seed):
    rng = np.random.default_rng(seed)
    n, c, hw = int(rng.integers(2, 4)), int(rng.integers(1, 4)), int(rng.integers(3, 6))
    cout, classes = int(rng.integers(1, 4)), int(rng.integers(2, 5))
    x = leaf(rng.normal(size=(n, c, hw, hw)))
    w = leaf(rng.normal(size=(cout, c, 3, 3)))
    g, b = leaf(rng.uniform(0.5, 1.5, cout)), leaf(rng.normal(size=cout))
    fw, fb = leaf(rng.normal(size=(classes, cout))), leaf(rng.normal(size=classes))
    targets = rng.integers(0, classes, size=n)
    use_bn = bool(rng.integers(0, 2))

    def build():
        h = T.conv2d(x, w, pad=1)
        if use_bn:
            h = T.batchnorm2d(h, g, b, BatchNormState(), train=True)
        h = T.relu(h)
        return T.nll_loss(T.log_softmax(T.linear(T.global_avg_pool2d(h), fw, fb)), targets)

    params = [x, w, fw, fb] + ([g, b] if use_bn else [])
    assert check_grads(build, params) < 1e-4


def test_relu_propagates_nan():
    out = T.relu(Tensor(np.array([np.nan, -1.0, 2.0]))).data
    assert np.isnan(out[0]) and out[1] == 0 and out[2] == 2


def test_dropout_eval_is_identity_and_train_scales():
    x = Tensor(np.ones((1000,)))
    np.testing.assert_array_equal(T.dropout(x, 0.2, None, train=False).data, x.data)
    out = T.dropout(x, 0.2, np.random.default_rng(0), train=True).data
    kept = out[out != 0]
    np.testing.assert_allclose(kept, 1 / 0.8)
    assert 0.7 < kept.size / 1000 < 0.9
