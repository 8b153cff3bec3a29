"""Slow, loop-based reference implementations.

Each function here recomputes a quantity with explicit scalar loops and
shares no code with the vectorised path it checks.
"""
from __future__ import annotations

import math

import numpy as np


def conv2d_loops(x, k, b=None, stride=1, padding=0):
    x, k = np.asarray(x, float), np.asarray(k, float)
    B, C, H, W = x.shape
    O, _, kh, kw = k.shape
    ph, pw = (padding, padding) if np.isscalar(padding) else padding
    Ho = (H + 2 * ph - kh) // stride + 1
    Wo = (W + 2 * pw - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0 if b is None else float(b[o])
                    for c in range(C):
                        for a in range(kh):
                            for d in range(kw):
                                y = i * stride + a - ph
                                xx = j * stride + d - pw
                                if 0 <= y < H and 0 <= xx < W:
                                    acc += x[n, c, y, xx] * k[o, c, a, d]
                    out[n, o, i, j] = acc
    return out


def matmul_loops(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    M, K = a.shape
    _, N = b.shape
    out = np.zeros((M, N))
    for i in range(M):
        for j in range(N):
            s = 0.0
            for t in range(K):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


def block_mean(x, k):
    x = np.asarray(x, float)
    H, W = x.shape[-2:]
    out = np.zeros(x.shape[:-2] + (H // k, W // k))
    for idx in np.ndindex(*x.shape[:-2]):
        for i in range(H // k):
            for j in range(W // k):
                s = 0.0
                for a in range(k):
                    for d in range(k):
                        s += x[idx + (i * k + a, j * k + d)]
                out[idx + (i, j)] = s / (k * k)
    return out


def bilinear_point(field, x, y):
    """Explicit 4-term bilinear formula at (x, y); outside neighbours are 0."""
    field = np.asarray(field, float)
    C, H, W = field.shape
    x0, y0 = math.floor(x), math.floor(y)
    ax, ay = x - x0, y - y0

    def at(yy, xx):
        if 0 <= yy < H and 0 <= xx < W:
            return field[:, yy, xx]
        return np.zeros(C)

    return ((1 - ax) * (1 - ay) * at(y0, x0) + ax * (1 - ay) * at(y0, x0 + 1)
            + (1 - ax) * ay * at(y0 + 1, x0) + ax * ay * at(y0 + 1, x0 + 1))


def volume_loops(f1, f2, scale=1.0):
    """``C[i,j,k,l] = scale * sum_h f1[h,i,j] f2[h,k,l]`` for one image pair."""
    D, H, W = f1.shape
    out = np.zeros((H, W, H, W))
    for i in range(H):
        for j in range(W):
            for k in range(H):
                for l in range(W):
                    s = 0.0
                    for h in range(D):
                        s += f1[h, i, j] * f2[h, k, l]
                    out[i, j, k, l] = s * scale
    return out


def lookup_gather(volume, flow, radius, levels, grid="square"):
    """Direct per-offset gather from a ``[H,W,H,W]`` volume; returns ``[L*K,H,W]``."""
    H, W = volume.shape[:2]
    offs = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)
            if grid == "square" or abs(dx) + abs(dy) <= radius]
    chans = []
    for lvl in range(levels):
        k = 2 ** lvl
        for dx, dy in offs:
            plane = np.zeros((H, W))
            for i in range(H):
                for j in range(W):
                    resp = volume[i, j]
                    pooled = np.array([[resp[a * k:(a + 1) * k, b * k:(b + 1) * k].mean()
                                        for b in range(W // k)] for a in range(H // k)])
                    x = (j + flow[0, i, j]) / k + dx
                    y = (i + flow[1, i, j]) / k + dy
                    plane[i, j] = bilinear_point(pooled[None], x, y)[0]
            chans.append(plane)
    return np.stack(chans)


def _sig(v):
    return 1.0 / (1.0 + math.exp(-v))


def gru_pixel_loop(h, x, wz, bz, wr, br, wq, bq):
    """Conv-GRU update for one image ``h[Ch,H,W]``, ``x[Cx,H,W]`` with 3x3
    kernels over zero-padded ``[h, x]``, evaluated pixel by pixel."""
    Ch, H, W = h.shape
    hx = np.concatenate([h, x])

    def conv_at(inp, w, b, o, i, j):
        s = b[o]
        for c in range(inp.shape[0]):
            for a in range(3):
                for d in range(3):
                    y, xx = i + a - 1, j + d - 1
                    if 0 <= y < H and 0 <= xx < W:
                        s += inp[c, y, xx] * w[o, c, a, d]
        return s

    z = np.zeros_like(h)
    r = np.zeros_like(h)
    for o in range(Ch):
        for i in range(H):
            for j in range(W):
                z[o, i, j] = _sig(conv_at(hx, wz, bz, o, i, j))
                r[o, i, j] = _sig(conv_at(hx, wr, br, o, i, j))
    rhx = np.concatenate([r * h, x])
    out = np.zeros_like(h)
    for o in range(Ch):
        for i in range(H):
            for j in range(W):
                q = math.tanh(conv_at(rhx, wq, bq, o, i, j))
                out[o, i, j] = (1 - z[o, i, j]) * h[o, i, j] + z[o, i, j] * q
    return out


def nearest_fill(values, filled):
    """Fill holes of ``values[2,H,W]`` from the nearest filled pixel by a
    full scan; ties go to the first filled pixel in row-major order."""
    _, H, W = values.shape
    out = values.copy()
    cells = [(i, j) for i in range(H) for j in range(W) if filled[i, j]]
    for i in range(H):
        for j in range(W):
            if filled[i, j]:
                continue
            best, bd = None, None
            for a, b in cells:
                d = (a - i) ** 2 + (b - j) ** 2
                if bd is None or d < bd:
                    best, bd = (a, b), d
            out[:, i, j] = values[:, best[0], best[1]]
    return out


def sequence_loss_hand(preds, gt, valid, gamma):
    n = len(preds)
    total = 0.0
    count = int(np.sum(valid))
    for i, p in enumerate(preds, 1):
        s = 0.0
        for idx in zip(*np.nonzero(valid)):
            b, y, x = idx
            s += abs(gt[b, 0, y, x] - p[b, 0, y, x]) + abs(gt[b, 1, y, x] - p[b, 1, y, x])
        total += gamma ** (n - i) * s / count
    return total
