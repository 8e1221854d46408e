"""JIT-compiled inner loops for the hot tensor ops.

All kernels are single-threaded, float64, and cached on disk after the first
compile. They fuse padding/layout transforms with the arithmetic so the BLAS
matmuls in tensor.py operate on one large contiguous matrix per call.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def im2col_t(x):
    """3x3/pad-1 patches of NCHW input as a (Cin*9) x (N*H*W) matrix."""
    n, cin, h, w = x.shape
    hw = h * w
    cols = np.empty((cin * 9, n * hw))
    for c in range(cin):
        for di in range(3):
            for dj in range(3):
                r = (c * 3 + di) * 3 + dj
                ii0 = di - 1
                jj0 = dj - 1
                for b in range(n):
                    base = b * hw
                    for i in range(h):
                        si = i + ii0
                        row_ok = 0 <= si < h
                        for j in range(w):
                            sj = j + jj0
                            if row_ok and 0 <= sj < w:
                                cols[r, base + i * w + j] = x[b, c, si, sj]
                            else:
                                cols[r, base + i * w + j] = 0.0
    return cols


@njit(cache=True)
def col2im_t(gcols, n, cin, h, w):
    """Overlap-add of patch gradients back into NCHW (transpose of im2col_t)."""
    gx = np.zeros((n, cin, h, w))
    hw = h * w
    for c in range(cin):
        for di in range(3):
            for dj in range(3):
                r = (c * 3 + di) * 3 + dj
                ii0 = di - 1
                jj0 = dj - 1
                for b in range(n):
                    base = b * hw
                    for i in range(h):
                        si = i + ii0
                        if si < 0 or si >= h:
                            continue
                        for j in range(w):
                            sj = j + jj0
                            if 0 <= sj < w:
                                gx[b, c, si, sj] += gcols[r, base + i * w + j]
    return gx


@njit(cache=True)
def to_cfirst(x):
    """NCHW -> C x (N*H*W)."""
    n, c, h, w = x.shape
    hw = h * w
    out = np.empty((c, n * hw))
    for b in range(n):
        for ci in range(c):
            base = b * hw
            for i in range(h):
                for j in range(w):
                    out[ci, base + i * w + j] = x[b, ci, i, j]
    return out


@njit(cache=True)
def from_cfirst(x2, n, c, h, w):
    """C x (N*H*W) -> NCHW."""
    out = np.empty((n, c, h, w))
    hw = h * w
    for b in range(n):
        for ci in range(c):
            base = b * hw
            for i in range(h):
                for j in range(w):
                    out[b, ci, i, j] = x2[ci, base + i * w + j]
    return out


@njit(cache=True)
def bn_stats(x):
    """Per-channel biased mean and variance over (N, H, W)."""
    n, c, h, w = x.shape
    cnt = n * h * w
    mean = np.zeros(c)
    var = np.zeros(c)
    for b in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    mean[ci] += x[b, ci, i, j]
    for ci in range(c):
        mean[ci] /= cnt
    for b in range(n):
        for ci in range(c):
            m = mean[ci]
            for i in range(h):
                for j in range(w):
                    d = x[b, ci, i, j] - m
                    var[ci] += d * d
    for ci in range(c):
        var[ci] /= cnt
    return mean, var


@njit(cache=True)
def bn_normalize(x, mean, inv_std):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for b in range(n):
        for ci in range(c):
            m = mean[ci]
            s = inv_std[ci]
            for i in range(h):
                for j in range(w):
                    out[b, ci, i, j] = (x[b, ci, i, j] - m) * s
    return out


@njit(cache=True)
def bn_backward(g, xhat, inv_std, cnt):
    """Gradient through train-mode normalization (batch mean and variance)."""
    n, c, h, w = g.shape
    gs = np.zeros(c)
    gxs = np.zeros(c)
    for b in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    gs[ci] += g[b, ci, i, j]
                    gxs[ci] += g[b, ci, i, j] * xhat[b, ci, i, j]
    gx = np.empty_like(g)
    for b in range(n):
        for ci in range(c):
            a = gs[ci] / cnt
            bq = gxs[ci] / cnt
            s = inv_std[ci]
            for i in range(h):
                for j in range(w):
                    gx[b, ci, i, j] = (g[b, ci, i, j] - a
                                       - xhat[b, ci, i, j] * bq) * s
    return gx


@njit(cache=True)
def scale_per_channel(g, inv_std):
    n, c, h, w = g.shape
    out = np.empty_like(g)
    for b in range(n):
        for ci in range(c):
            s = inv_std[ci]
            for i in range(h):
                for j in range(w):
                    out[b, ci, i, j] = g[b, ci, i, j] * s
    return out


@njit(cache=True)
def affine_fwd(x, gamma, beta):
    n, c, h, w = x.shape
    out = np.empty_like(x)
    for b in range(n):
        for ci in range(c):
            gm = gamma[ci]
            bt = beta[ci]
            for i in range(h):
                for j in range(w):
                    out[b, ci, i, j] = x[b, ci, i, j] * gm + bt
    return out


@njit(cache=True)
def affine_bwd_params(g, x):
    n, c, h, w = g.shape
    gg = np.zeros(c)
    gb = np.zeros(c)
    for b in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    gg[ci] += g[b, ci, i, j] * x[b, ci, i, j]
                    gb[ci] += g[b, ci, i, j]
    return gg, gb


@njit(cache=True)
def relu_fwd(x):
    flat = x.reshape(-1)
    out = np.empty_like(flat)
    for i in range(flat.size):
        v = flat[i]
        out[i] = v if v > 0.0 else 0.0
    return out.reshape(x.shape)


@njit(cache=True)
def relu_bwd(g, x):
    gf = g.reshape(-1)
    xf = x.reshape(-1)
    out = np.empty_like(gf)
    for i in range(gf.size):
        out[i] = gf[i] if xf[i] > 0.0 else 0.0
    return out.reshape(x.shape)


@njit(cache=True)
def gram_pair_fwd(fo, fa):
    """Per-sample gram difference G(fa) - G(fo) and its squared Frobenius sum."""
    n, c, s = fo.shape
    diff = np.empty((n, c, c))
    total = 0.0
    for b in range(n):
        for i in range(c):
            for j in range(i, c):
                go = 0.0
                ga = 0.0
                for t in range(s):
                    go += fo[b, i, t] * fo[b, j, t]
                    ga += fa[b, i, t] * fa[b, j, t]
                d = ga - go
                diff[b, i, j] = d
                diff[b, j, i] = d
                total += d * d if i == j else 2.0 * d * d
    return diff, total


@njit(cache=True)
def gram_pair_bwd(diff, f, k):
    """k * diff[b] @ f[b] per sample (gradient of the squared gram distance)."""
    n, c, s = f.shape
    out = np.empty((n, c, s))
    for b in range(n):
        for i in range(c):
            for t in range(s):
                acc = 0.0
                for j in range(c):
                    acc += diff[b, i, j] * f[b, j, t]
                out[b, i, t] = k * acc
    return out


@njit(cache=True)
def avg_pool2_fwd(x):
    n, c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    out = np.empty((n, c, h2, w2))
    for b in range(n):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    out[b, ci, i, j] = 0.25 * (
                        x[b, ci, 2 * i, 2 * j] + x[b, ci, 2 * i, 2 * j + 1]
                        + x[b, ci, 2 * i + 1, 2 * j] + x[b, ci, 2 * i + 1, 2 * j + 1])
    return out


@njit(cache=True)
def avg_pool2_bwd(g, h, w):
    n, c, h2, w2 = g.shape
    gx = np.empty((n, c, h, w))
    for b in range(n):
        for ci in range(c):
            for i in range(h2):
                for j in range(w2):
                    v = 0.25 * g[b, ci, i, j]
                    gx[b, ci, 2 * i, 2 * j] = v
                    gx[b, ci, 2 * i, 2 * j + 1] = v
                    gx[b, ci, 2 * i + 1, 2 * j] = v
                    gx[b, ci, 2 * i + 1, 2 * j + 1] = v
    return gx
