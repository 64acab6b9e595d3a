"""Compiled loops for the memory-bound layers (patch extraction, pooling, batch-norm statistics).

All kernels work on channels-last (B, H, W, C) C-contiguous arrays and are
single-threaded, so results do not depend on the machine's core count.
``AVAILABLE`` is False when numba cannot be imported; callers then fall back
to their pure-numpy paths, which are also what the tests compare against.
"""

from __future__ import annotations

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None

AVAILABLE = numba is not None


def _jit(fn):
    if numba is None:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


@_jit
def im2col(x, kh, kw, s, p, cols):
    """Gather every kh x kw patch of ``x`` into ``cols`` (B, Ho, Wo, kh, kw * C), zero outside."""
    B, H, W, C = x.shape
    Ho, Wo = cols.shape[1], cols.shape[2]
    rows = x.reshape(B, H, W * C)
    run = kw * C
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                x0 = ox * s - p
                inside = x0 >= 0 and x0 + kw <= W
                for i in range(kh):
                    y = oy * s - p + i
                    if y < 0 or y >= H:
                        for t in range(run):
                            cols[b, oy, ox, i, t] = 0.0
                    elif inside:
                        # a patch row is one contiguous run of kw * C values
                        base = x0 * C
                        for t in range(run):
                            cols[b, oy, ox, i, t] = rows[b, y, base + t]
                    else:
                        for j in range(kw):
                            xx = x0 + j
                            for c in range(C):
                                cols[b, oy, ox, i, j * C + c] = x[b, y, xx, c] if 0 <= xx < W else 0.0
    return cols


@_jit
def col2im(dcols, s, p, dx):
    """Scatter-add patch gradients back onto the image; ``dx`` must be zeroed.

    Kernel offsets are accumulated in (i, j) order for every cell, the same
    order as adding one shifted slab per offset.
    """
    B, Ho, Wo, kh, kw, C = dcols.shape
    H, W = dx.shape[1], dx.shape[2]
    for b in range(B):
        for i in range(kh):
            for j in range(kw):
                for oy in range(Ho):
                    y = oy * s - p + i
                    if y < 0 or y >= H:
                        continue
                    for ox in range(Wo):
                        xx = ox * s - p + j
                        if xx < 0 or xx >= W:
                            continue
                        for c in range(C):
                            dx[b, y, xx, c] += dcols[b, oy, ox, i, j, c]
    return dx


@_jit
def maxpool_forward(x, k, s, p, out, arg):
    """Max over k x k windows with stride s and implicit -inf padding p.

    ``arg`` receives the flat in-window index (i * k + j) of the first maximum.
    """
    B, H, W, C = x.shape
    Ho, Wo = out.shape[1], out.shape[2]
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                for c in range(C):
                    out[b, oy, ox, c] = -np.inf
                    arg[b, oy, ox, c] = 0
                for i in range(k):
                    y = oy * s - p + i
                    if y < 0 or y >= H:
                        continue
                    for j in range(k):
                        xx = ox * s - p + j
                        if xx < 0 or xx >= W:
                            continue
                        w = i * k + j
                        for c in range(C):
                            v = x[b, y, xx, c]
                            if v > out[b, oy, ox, c]:
                                out[b, oy, ox, c] = v
                                arg[b, oy, ox, c] = w
    return out, arg


@_jit
def maxpool_backward(g, arg, k, s, p, dx):
    """Route each output gradient to the input cell recorded in ``arg``; ``dx`` must be zeroed."""
    B, Ho, Wo, C = g.shape
    for b in range(B):
        for oy in range(Ho):
            for ox in range(Wo):
                for c in range(C):
                    w = arg[b, oy, ox, c]
                    y = oy * s - p + w // k
                    xx = ox * s - p + w % k
                    dx[b, y, xx, c] += g[b, oy, ox, c]
    return dx


@_jit
def channel_moments(x2):
    """Per-column mean and population variance of an (N, C) matrix, accumulated in float64."""
    N, C = x2.shape
    total = np.zeros(C)
    for n in range(N):
        for c in range(C):
            total[c] += x2[n, c]
    mean = total / N
    sq = np.zeros(C)
    for n in range(N):
        for c in range(C):
            d = x2[n, c] - mean[c]
            sq[c] += d * d
    return mean, sq / N


@_jit
def bn_normalize(x2, mean, inv_std, gamma, beta, xhat, out):
    N, C = x2.shape
    for n in range(N):
        for c in range(C):
            h = (x2[n, c] - mean[c]) * inv_std[c]
            xhat[n, c] = h
            out[n, c] = h * gamma[c] + beta[c]
    return xhat, out


@_jit
def bn_grad_sums(g2, xhat):
    """Column sums of g and of g * xhat, accumulated in float64."""
    N, C = g2.shape
    sg = np.zeros(C)
    sgx = np.zeros(C)
    for n in range(N):
        for c in range(C):
            v = g2[n, c]
            sg[c] += v
            sgx[c] += v * xhat[n, c]
    return sg, sgx


@_jit
def bn_input_grad(g2, xhat, scale, mean_g, mean_gx, gx):
    N, C = g2.shape
    for n in range(N):
        for c in range(C):
            gx[n, c] = scale[c] * (g2[n, c] - mean_g[c] - xhat[n, c] * mean_gx[c])
    return gx


@_jit
def warp_normalize(src, S, crop, top, left, R, rotate, cos, sin, means, stds, out):
    """Resample an (H, W, C) float64 image through the augmentation geometry and normalise.

    For each output pixel: centre in crop coordinates, undo the rotation about
    the centre of the R x R image (black outside its footprint), map back
    through the first resize, sample bilinearly with edge clamping, and write
    ``(v / 255 - mean) / std`` per channel into ``out`` (3, S, S) float32.
    Grayscale sources are replicated to three channels. The arithmetic
    matches the vectorised reference operation for operation.
    """
    H, W, C = src.shape
    step = crop / S
    c0 = (R - 1) / 2.0
    ys = H / R
    xs = W / R
    for oy in range(S):
        gy = (oy + 0.5) * step - 0.5 + top
        for ox in range(S):
            ry = gy
            rx = (ox + 0.5) * step - 0.5 + left
            keep = True
            if rotate:
                dy = ry - c0
                dx = rx - c0
                ry = c0 + cos * dy - sin * dx
                rx = c0 + sin * dy + cos * dx
                keep = ry >= -0.5 and ry <= R - 0.5 and rx >= -0.5 and rx <= R - 0.5
            y = (ry + 0.5) * ys - 0.5
            x = (rx + 0.5) * xs - 0.5
            y = min(max(y, 0.0), H - 1)
            x = min(max(x, 0.0), W - 1)
            y0 = int(y)
            x0 = int(x)
            fy = y - y0
            fx = x - x0
            y1 = y0 + 1 if y0 < H - 1 else y0
            x1 = x0 + 1 if x0 < W - 1 else x0
            for ch in range(3):
                k = ch if C == 3 else 0
                v00 = src[y0, x0, k]
                v01 = src[y0, x1, k]
                v10 = src[y1, x0, k]
                v11 = src[y1, x1, k]
                t = v00 + (v01 - v00) * fx
                b = v10 + (v11 - v10) * fx
                v = t + (b - t) * fy
                if not keep:
                    v = v * 0.0
                out[ch, oy, ox] = (v / 255.0 - means[ch]) / stds[ch]
    return out
