"""Layer primitives against direct-loop and wide-precision oracles."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from octoutcome import functional as F
from octoutcome.gradcheck import gradcheck
from octoutcome.tensor import ShapeError, Tensor


def direct_conv(x, w, b, stride, pad):
    """Six nested loops, float64: the textbook definition of cross-correlation."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho = (H + 2 * pad - kh) // stride + 1
    Wo = (W + 2 * pad - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                y, xx = i * stride - pad + u, j * stride - pad + v
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += float(x[n, c, y, xx]) * float(w[o, c, u, v])
                    out[n, o, i, j] = acc
    return out


def direct_maxpool(x, k, s, p):
    B, C, H, W = x.shape
    Ho, Wo = (H + 2 * p - k) // s + 1, (W + 2 * p - k) // s + 1
    out = np.full((B, C, Ho, Wo), -np.inf)
    for i in range(Ho):
        for j in range(Wo):
            for u in range(k):
                for v in range(k):
                    y, xx = i * s - p + u, j * s - p + v
                    if 0 <= y < H and 0 <= xx < W:
                        out[:, :, i, j] = np.maximum(out[:, :, i, j], x[:, :, y, xx])
    return out


def test_identity_kernel_returns_input():
    x = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    out = F.conv2d(x, Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)))
    np.testing.assert_array_equal(out.data, x.data)


def test_conv_matches_direct_loop_oracle():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 8, 8)).astype(np.float32)
    w = rng.standard_normal((4, 3, 3, 3)).astype(np.float32)
    got = F.conv2d(Tensor(x), Tensor(w), padding=1).data
    want = direct_conv(x, w, None, 1, 1)
    assert np.max(np.abs(got - want)) / np.max(np.abs(want)) <= 1e-5


@settings(max_examples=30, deadline=None)
@given(stride=st.integers(1, 3), pad=st.integers(0, 2), k=st.sampled_from([1, 3, 5]),
       size=st.integers(5, 9), seed=st.integers(0, 10_000), bias=st.booleans())
def test_conv_matches_oracle_for_stride_and_padding(stride, pad, k, size, seed, bias):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 2, size, size))
    w = rng.standard_normal((3, 2, k, k))
    b = rng.standard_normal(3) if bias else None
    got = F.conv2d(Tensor(x), Tensor(w), None if b is None else Tensor(b), stride=stride, padding=pad).data
    want = direct_conv(x, w, b, stride, pad)
    np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-9)


def test_conv_rejects_mismatched_channels_naming_dimension():
    with pytest.raises(ShapeError, match="channel"):
        F.conv2d(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((2, 4, 3, 3))))


def test_relu_values_and_subgradient_at_zero():
    x = Tensor(np.array([-1.0, 0.0, 2.0]), requires_grad=True)
    y = F.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 2])
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_gradcheck_excludes_relu_kink():
    r = gradcheck(lambda x: F.relu(x).sum(), [np.array([0.0, 1.0, -1.0, 2.0])])
    assert r.n_excluded == 1 and r.n_compared == 3 and r.max_rel_error <= 1e-9


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 3), s=st.integers(1, 3), p=st.integers(0, 1), size=st.integers(3, 8),
       seed=st.integers(0, 10_000))
def test_maxpool_matches_oracle_and_kernel_matches_numpy(k, s, p, size, seed):
    if p * 2 > k:
        p = 0
    x = np.random.default_rng(seed).standard_normal((2, 3, size, size)).astype(np.float32)
    got = F.max_pool2d(Tensor(x), k, s, p).data
    np.testing.assert_array_equal(got, direct_maxpool(x, k, s, p))
    R = np.random.default_rng(seed + 1).standard_normal(got.shape).astype(np.float32)
    grads = []
    for use in (True, False):
        F.USE_KERNELS = use
        try:
            t = Tensor(x, requires_grad=True)
            (F.max_pool2d(t, k, s, p) * Tensor(R)).sum().backward()
            grads.append(t.grad)
        finally:
            F.USE_KERNELS = True
    # overlapping windows sum into a cell in a different order on the two paths;
    # up to k*k float32 addends of size |R| can cancel, so bound by their rounding
    bound = k * k * np.finfo(np.float32).eps * float(np.abs(R).max())
    np.testing.assert_allclose(grads[0], grads[1], rtol=1e-6, atol=bound)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 4), s=st.integers(1, 3), p=st.integers(0, 2), size=st.integers(4, 9),
       seed=st.integers(0, 10_000))
def test_conv_kernel_path_matches_numpy_path(k, s, p, size, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, size, size))
    w = rng.standard_normal((4, 3, k, k))
    R = None
    results = []
    for use in (True, False):
        F.USE_KERNELS = use
        try:
            xt, wt = Tensor(x, requires_grad=True), Tensor(w, requires_grad=True)
            out = F.conv2d(xt, wt, stride=s, padding=p)
            R = rng.standard_normal(out.shape) if R is None else R
            (out * Tensor(R)).sum().backward()
            results.append((out.data, xt.grad, wt.grad))
        finally:
            F.USE_KERNELS = True
    (o1, gx1, gw1), (o2, gx2, gw2) = results
    # patch extraction is a copy, so the forward pass and weight gradient agree exactly
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(gw1, gw2)
    np.testing.assert_allclose(gx1, gx2, rtol=1e-12, atol=1e-12)


def test_maxpool_routes_gradient_to_first_maximum_on_ties():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    F.max_pool2d(x, 2).sum().backward()
    np.testing.assert_array_equal(x.grad[0, 0], [[1, 0], [0, 0]])


def test_batchnorm_train_output_is_standardised():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((8, 4, 5, 5)) * 3 + 2)
    rm, rv = np.zeros(4), np.ones(4)
    y = F.batch_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)), rm, rv, True).data
    np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-5)
    # running statistics moved by momentum 0.1 towards the (unbiased) batch statistics
    n = 8 * 25
    batch_var = x.data.var(axis=(0, 2, 3)) * n / (n - 1)
    np.testing.assert_allclose(rm, 0.1 * x.data.mean(axis=(0, 2, 3)), rtol=1e-6)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * batch_var, rtol=1e-6)
    assert np.all(rv >= 0)


def test_batchnorm_eval_uses_running_statistics_only():
    x = Tensor(np.random.default_rng(0).standard_normal((4, 2, 3, 3)))
    rm, rv = np.array([1.0, -1.0]), np.array([4.0, 0.25])
    y = F.batch_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, False).data
    want = (x.data - rm[None, :, None, None]) / np.sqrt(rv[None, :, None, None] + 1e-5)
    np.testing.assert_allclose(y, want, rtol=1e-12)
    np.testing.assert_array_equal(rm, [1.0, -1.0])  # untouched in eval mode


def test_batchnorm_kernel_path_matches_numpy_path():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((6, 5, 4, 4)).astype(np.float32)
    g, b = rng.standard_normal(5).astype(np.float32), rng.standard_normal(5).astype(np.float32)
    R = rng.standard_normal(x.shape).astype(np.float32)
    outs = []
    for use in (True, False):
        F.USE_KERNELS = use
        try:
            xt, gt, bt = (Tensor(a, requires_grad=True) for a in (x, g, b))
            y = F.batch_norm(xt, gt, bt, np.zeros(5), np.ones(5), True)
            (y * Tensor(R)).sum().backward()
            outs.append((y.data, xt.grad, gt.grad, bt.grad))
        finally:
            F.USE_KERNELS = True
    for a, b_ in zip(*outs):
        np.testing.assert_allclose(a, b_, rtol=1e-4, atol=1e-5)


def test_bce_known_values_and_stability():
    assert float(F.bce_with_logits(Tensor(np.array([0.0])), [1]).data) == pytest.approx(math.log(2), abs=1e-6)
    assert float(F.bce_with_logits(Tensor(np.array([50.0])), [1]).data) == pytest.approx(0.0, abs=1e-12)
    assert float(F.bce_with_logits(Tensor(np.array([-50.0])), [1]).data) == pytest.approx(50.0, rel=1e-9)
    with pytest.raises(ValueError):
        F.bce_with_logits(Tensor(np.array([0.0])), [2])


def test_bce_matches_wide_precision_naive_formula():
    from decimal import Decimal, getcontext

    getcontext().prec = 50
    rng = np.random.default_rng(11)
    z = rng.standard_normal(16) * 4
    y = (rng.random(16) < 0.5).astype(float)
    total = Decimal(0)
    for zi, yi in zip(z, y):
        p = 1 / (1 + (-Decimal(float(zi))).exp())
        total += -(Decimal(yi) * p.ln() + (1 - Decimal(yi)) * (1 - p).ln())
    want = float(total / 16)
    got = float(F.bce_with_logits(Tensor(z), y).data)
    assert abs(got - want) / want <= 1e-6


def test_linear_and_global_pool_shapes():
    x = Tensor(np.ones((2, 3, 4, 4)))
    pooled = F.global_avg_pool(x)
    assert pooled.shape == (2, 3)
    out = F.linear(pooled, Tensor(np.ones((5, 3))), Tensor(np.zeros(5)))
    np.testing.assert_allclose(out.data, np.full((2, 5), 3.0))


LAYER_CASES = ["conv2d", "batchnorm2d", "maxpool2d", "global_avg_pool", "dense", "relu", "sigmoid"]


@settings(max_examples=100, deadline=None)
@given(kind=st.sampled_from(LAYER_CASES), B=st.integers(2, 3), C=st.integers(1, 3),
       H=st.integers(3, 6), seed=st.integers(0, 2 ** 31 - 1))
def test_every_layer_kind_passes_gradcheck_on_random_shapes(kind, B, C, H, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, C, H, H))
    if kind == "conv2d":
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        fn, args = (lambda x, w, b: F.conv2d(x, w, b, stride=stride, padding=pad)), [x, rng.standard_normal((2, C, 3, 3)), rng.standard_normal(2)]
    elif kind == "batchnorm2d":
        fn = lambda x, g, b: F.batch_norm(x, g, b, np.zeros(C), np.ones(C), True)
        args = [x, rng.standard_normal(C) + 1.5, rng.standard_normal(C)]
    elif kind == "maxpool2d":
        fn, args = (lambda x: F.max_pool2d(x, 2, 1)), [x]
    elif kind == "global_avg_pool":
        fn, args = F.global_avg_pool, [x]
    elif kind == "dense":
        fn, args = F.linear, [x.reshape(B, -1), rng.standard_normal((3, C * H * H)), rng.standard_normal(3)]
    elif kind == "relu":
        fn, args = F.relu, [x]
    else:
        fn, args = F.sigmoid, [x]
    shape = fn(*[Tensor(a) for a in args]).shape
    R = Tensor(rng.standard_normal(shape))
    r = gradcheck(lambda *ts: (fn(*ts) * R).sum(), args)
    assert r.finite and r.max_rel_error <= 1e-5, (kind, r)
