"""Differentiable layer primitives over :class:`~octoutcome.tensor.Tensor`.

Image tensors have batch x channels x height x width shape. Convolution and
batch norm keep their outputs channels-last in memory (an NCHW-shaped
transposed view), which keeps the patch-matrix products and per-channel
reductions on contiguous rows. Any layout is accepted as input.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import kernels
from .tensor import ShapeError, Tensor, as_tensor, is_grad_enabled, make_result

# compiled loops for patch extraction, pooling and batch norm; the numpy paths remain as fallback and reference
USE_KERNELS = True


def _use_kernels(a: np.ndarray) -> bool:
    # the compiled loops handle single and double precision; anything else
    # (e.g. extended precision for finite-difference oracles) takes the numpy path
    return kernels.AVAILABLE and USE_KERNELS and a.dtype in (np.float32, np.float64)


def channels_last(a: np.ndarray) -> np.ndarray:
    """(B, C, H, W) array -> C-contiguous (B, H, W, C), free when already laid out so."""
    t = a.transpose(0, 2, 3, 1)
    return t if t.flags.c_contiguous else np.ascontiguousarray(t)


def _from_rows(a2: np.ndarray, shape) -> np.ndarray:
    # inverse of the (N, C) view taken in batch_norm
    if len(shape) == 2:
        return a2
    B, C, H, W = shape
    return a2.reshape(B, H, W, C).transpose(0, 3, 1, 2)


def _pair(v):
    return (v, v) if isinstance(v, int) else tuple(v)


def _out_size(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _patches(xh: np.ndarray, kh: int, kw: int, s: int, p: int, Ho: int, Wo: int, fast: bool) -> np.ndarray:
    """Channels-last input -> (B, Ho, Wo, kh * kw * C) patch matrix, rows in (i, j, c) order."""
    B, H, W, C = xh.shape
    if fast:
        cols = np.empty((B, Ho, Wo, kh, kw * C), dtype=xh.dtype)
        return kernels.im2col(xh, kh, kw, s, p, cols).reshape(B, Ho, Wo, kh * kw * C)
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=xh.dtype)
    xp[:, p:p + H, p:p + W, :] = xh
    cols = np.empty((B, Ho, Wo, kh, kw * C), dtype=xh.dtype)
    sb, sh, sw, sc = xp.strides
    for i in range(kh):
        # in a channels-last row the kw x C patch row is one contiguous run
        runs = np.lib.stride_tricks.as_strided(
            xp[:, i:], shape=(B, Ho, Wo, kw * C), strides=(sb, sh * s, sw * s, sc), writeable=False)
        cols[:, :, :, i, :] = runs
    return cols.reshape(B, Ho, Wo, kh * kw * C)


def _unpatch_numpy(gm: np.ndarray, w: np.ndarray, s: int, p: int, H: int, W: int, Ho: int, Wo: int) -> np.ndarray:
    """Input gradient (B, H, W, C) from output-gradient rows ``gm``, one shifted slab per kernel offset."""
    O, C, kh, kw = w.shape
    B = gm.shape[0] // (Ho * Wo)
    wk = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # (kh, kw, O, C)
    dxp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=gm.dtype)
    for i in range(kh):
        for j in range(kw):
            d = (gm @ wk[i, j]).reshape(B, Ho, Wo, C)
            dxp[:, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s, :] += d
    return np.ascontiguousarray(dxp[:, p:p + H, p:p + W, :])


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding.

    ``x`` is (B, C, H, W), ``weight`` is (O, C, kh, kw), ``bias`` is (O,).
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d (batch, channels, height, width), got {x.ndim}-d {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d: weight must be 4-d, got shape {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise ShapeError(f"conv2d: input channels (dim 1) is {C} but weight expects {Cw}")
    if bias is not None and bias.shape != (O,):
        raise ShapeError(f"conv2d: bias dim 0 is {bias.shape} but weight has {O} output channels")
    s, p = int(stride), int(padding)
    Ho, Wo = _out_size(H, kh, s, p), _out_size(W, kw, s, p)
    if Ho < 1:
        raise ShapeError(f"conv2d: input height (dim 2) {H} too small for kernel {kh} with padding {p}")
    if Wo < 1:
        raise ShapeError(f"conv2d: input width (dim 3) {W} too small for kernel {kw} with padding {p}")

    dtype = x.dtype
    fast = _use_kernels(x.data)
    cols = _patches(channels_last(x.data), kh, kw, s, p, Ho, Wo, fast)
    wmat = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0)).reshape(kh * kw * C, O)
    if is_grad_enabled() and (x.requires_grad or weight.requires_grad):
        cols = cols.reshape(B * Ho * Wo, kh * kw * C)
        out = cols @ wmat
    else:
        # inference: one product per sample, so the BLAS call has the same shape
        # whatever the batch size and a sample's output does not depend on the
        # rest of the batch
        cols = cols.reshape(B, Ho * Wo, kh * kw * C)
        out = np.empty((B, Ho * Wo, O), dtype=np.result_type(cols, wmat))
        for b in range(B):
            np.matmul(cols[b], wmat, out=out[b])
        out = out.reshape(B * Ho * Wo, O)
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)

    def backward(g):
        gm = channels_last(g).reshape(B * Ho * Wo, O)
        gw = gb = gx = None
        if weight.requires_grad:
            gw = np.ascontiguousarray((cols.T @ gm).reshape(kh, kw, C, O).transpose(3, 2, 0, 1))
        if bias is not None and bias.requires_grad:
            gb = np.ones(gm.shape[0], dtype=dtype) @ gm
        if x.requires_grad:
            if fast:
                dcols = (gm @ wmat.T).reshape(B, Ho, Wo, kh, kw, C)
                dx = kernels.col2im(dcols, s, p, np.zeros((B, H, W, C), dtype=dtype))
            else:
                dx = _unpatch_numpy(gm, weight.data, s, p, H, W, Ho, Wo)
            gx = dx.transpose(0, 3, 1, 2)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, running_mean: np.ndarray,
               running_var: np.ndarray, training: bool, momentum: float = 0.1,
               eps: float = 1e-5) -> Tensor:
    """Batch normalisation over every axis except axis 1.

    In training mode the batch statistics normalise the input and the running
    statistics are updated in place (unbiased variance, as is conventional).
    In eval mode only the running statistics are used.
    """
    if x.ndim < 2:
        raise ShapeError(f"batch_norm: input must be at least 2-d, got shape {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm: input channels (dim 1) is {C} but scale/shift have shape {gamma.shape}")
    # work on an (N, C) matrix; for 4-d input it is a view of the channels-last buffer
    if x.ndim == 2:
        x2 = x.data
    else:
        x2 = channels_last(x.data).reshape(-1, C)
    n = x2.shape[0]
    dtype = x.dtype
    fast = _use_kernels(x.data)
    acc = np.result_type(dtype, np.float64)  # accumulate in at least double precision
    if fast:
        x2 = np.ascontiguousarray(x2)

    if training:
        if n < 2:
            raise ShapeError("batch_norm: training mode needs more than one value per channel")
        if fast:
            mu, var = kernels.channel_moments(x2)
        else:
            mu = x2.mean(axis=0, dtype=acc)
            var = np.square(x2 - mu).mean(axis=0)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))
    else:
        mu, var = running_mean, running_var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    mu = np.asarray(mu).astype(dtype)
    if fast:
        xhat = np.empty_like(x2)
        out = np.empty_like(x2)
        kernels.bn_normalize(x2, mu, inv_std, gamma.data, beta.data, xhat, out)
    else:
        xhat = (x2 - mu) * inv_std
        out = xhat * gamma.data + beta.data

    def backward(g):
        g2 = g if g.ndim == 2 else channels_last(g).reshape(-1, C)
        if fast:
            g2 = np.ascontiguousarray(g2)
            sg, sgx = kernels.bn_grad_sums(g2, xhat)
        else:
            sg = g2.sum(axis=0, dtype=acc)
            sgx = np.einsum("ij,ij->j", g2, xhat, dtype=acc)
        gx = None
        if x.requires_grad:
            scale = gamma.data * inv_std
            if training:
                mean_g = (sg / n).astype(dtype)
                mean_gx = (sgx / n).astype(dtype)
                if fast:
                    gx = kernels.bn_input_grad(g2, xhat, scale, mean_g, mean_gx, np.empty_like(g2))
                else:
                    gx = scale * (g2 - mean_g - xhat * mean_gx)
            else:
                gx = g2 * scale
            gx = _from_rows(gx, x.shape)
        return (gx, sgx.astype(dtype) if gamma.requires_grad else None,
                sg.astype(dtype) if beta.requires_grad else None)

    return make_result(_from_rows(out, x.shape), (x, gamma, beta), backward)


def max_pool2d(x: Tensor, kernel_size: int = 2, stride: Optional[int] = None,
               padding: int = 0) -> Tensor:
    """Max pooling; gradient goes to the first maximal element of each window."""
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be 4-d, got shape {x.shape}")
    k = int(kernel_size)
    s = k if stride is None else int(stride)
    p = int(padding)
    B, C, H, W = x.shape
    Ho, Wo = _out_size(H, k, s, p), _out_size(W, k, s, p)
    if Ho < 1:
        raise ShapeError(f"max_pool2d: input height (dim 2) {H} smaller than window {k}")
    if Wo < 1:
        raise ShapeError(f"max_pool2d: input width (dim 3) {W} smaller than window {k}")

    if _use_kernels(x.data):
        xh = channels_last(x.data)
        out = np.empty((B, Ho, Wo, C), dtype=xh.dtype)
        arg = np.empty((B, Ho, Wo, C), dtype=np.uint8)
        kernels.maxpool_forward(xh, k, s, p, out, arg)

        def backward(g):
            dx = np.zeros((B, H, W, C), dtype=xh.dtype)
            kernels.maxpool_backward(channels_last(g), arg, k, s, p, dx)
            return (dx.transpose(0, 3, 1, 2),)

        return make_result(out.transpose(0, 3, 1, 2), (x,), backward)
    return _max_pool2d_numpy(x, k, s, p, Ho, Wo)


def _max_pool2d_numpy(x: Tensor, k: int, s: int, p: int, Ho: int, Wo: int) -> Tensor:
    B, C, H, W = x.shape
    if p:
        xp = np.full((B, C, H + 2 * p, W + 2 * p), -np.inf, dtype=x.dtype)
        xp[:, :, p:p + H, p:p + W] = x.data
    else:
        xp = x.data
    windows = [(Ellipsis, slice(i, i + s * (Ho - 1) + 1, s), slice(j, j + s * (Wo - 1) + 1, s))
               for i in range(k) for j in range(k)]
    out = xp[windows[0]].copy(order="K")
    need_grad = x.requires_grad and is_grad_enabled()
    arg = np.zeros(out.shape, dtype=np.uint8) if need_grad else None
    for w, win in enumerate(windows[1:], start=1):
        cand = xp[win]
        if need_grad:
            # strict comparison keeps the first maximal element of each window
            better = cand > out
            np.copyto(out, cand, where=better)
            np.copyto(arg, w, where=better)
        else:
            np.maximum(out, cand, out=out)

    tiled = k == s and H + 2 * p == k * Ho and W + 2 * p == k * Wo

    def backward(g):
        if tiled:
            # every input cell belongs to exactly one window
            dxp = np.empty_like(xp)
            for w, win in enumerate(windows):
                dxp[win] = np.where(arg == w, g, 0)
        else:
            dxp = np.zeros_like(xp)
            for w, win in enumerate(windows):
                dxp[win] += np.where(arg == w, g, 0)
        return (dxp[:, :, p:p + H, p:p + W] if p else dxp,)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    """Mean over the spatial axes: (B, C, H, W) -> (B, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: input must be 4-d, got shape {x.shape}")
    B, C, H, W = x.shape
    area = H * W

    def backward(g):
        return (np.broadcast_to((g / area)[:, :, None, None], x.shape),)

    return make_result(x.data.mean(axis=(2, 3)), (x,), backward)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out_features, in_features)."""
    if x.ndim != 2:
        raise ShapeError(f"dense: input must be 2-d (batch, features), got shape {x.shape}")
    if weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"dense: input features (dim 1) is {x.shape[1]} but weight expects {weight.shape[-1]}")
    # row by row, so a sample's output does not depend on the rest of the batch
    # (BLAS picks different summation orders for different matrix shapes)
    out = np.empty((x.shape[0], weight.shape[0]), dtype=np.result_type(x.data, weight.data))
    for i in range(x.shape[0]):
        out[i] = weight.data @ x.data[i]
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"dense: bias dim 0 is {bias.shape} but weight has {weight.shape[0]} outputs")
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    # subgradient at 0 is 0
    mask = x.data > 0
    out = np.maximum(x.data, 0)

    def backward(g):
        return (g * mask,)

    return make_result(out, (x,), backward)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)

    def backward(g):
        return (g * out * (1.0 - out),)

    return make_result(out, (x,), backward)


def bce_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean binary cross-entropy on raw logits, in the log-sum-exp stable form."""
    y = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if y.shape != logits.shape:
        raise ShapeError(f"bce_with_logits: targets shape {y.shape} != logits shape {logits.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("bce_with_logits: targets must be 0 or 1")
    z = logits.data
    y = y.astype(z.dtype)
    n = z.size
    losses = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    out = np.asarray(losses.mean(), dtype=z.dtype)

    def backward(g):
        return ((_sigmoid(z) - y) * (g / n),)

    return make_result(out, (logits,), backward)


def cosine_similarity(a: Tensor, b: Tensor, axis: int = 1) -> Tensor:
    """Row-wise cosine similarity built from primitive ops."""
    from .tensor import sqrt

    dot = (a * b).sum(axis=axis)
    na = sqrt((a * a).sum(axis=axis))
    nb = sqrt((b * b).sum(axis=axis))
    return dot / (na * nb)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


__all__ = [
    "as_tensor", "batch_norm", "bce_with_logits", "conv2d", "cosine_similarity",
    "flatten", "global_avg_pool", "linear", "max_pool2d", "relu", "sigmoid",
]
