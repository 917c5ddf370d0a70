"""Independent loop-level reference implementations used as test oracles.

Nothing here imports the package's op implementations; each function
evaluates its formula element by element in float64.
"""

from __future__ import annotations

import math

import numpy as np


def softmax_row(logits):
    top = max(logits)
    exps = [math.exp(s - top) for s in logits]
    total = sum(exps)
    return [e / total for e in exps]


def reference_attention(x: np.ndarray, wf, wg, wh, mu: float, bf=None, bg=None, bh=None):
    """Attention block on one ``(C, H, W)`` map, pair by pair. Returns ``(M, X'')``."""
    C, H, W = x.shape
    n = H * W
    flat = x.reshape(C, n)
    bf = np.zeros(wf.shape[0]) if bf is None else bf
    bg = np.zeros(wg.shape[0]) if bg is None else bg
    bh = np.zeros(wh.shape[0]) if bh is None else bh
    a = [wf @ flat[:, p] + bf for p in range(n)]
    b = [wg @ flat[:, p] + bg for p in range(n)]
    v = [wh @ flat[:, p] + bh for p in range(n)]
    m = np.zeros((n, n))
    for j in range(n):
        m[j] = softmax_row([float(np.dot(a[j], b[i])) for i in range(n)])
    out = np.zeros((C, n))
    for j in range(n):
        acc = np.zeros(C)
        for i in range(n):
            acc += m[j, i] * v[i]
        out[:, j] = flat[:, j] + mu * acc
    return m, out.reshape(C, H, W)


def conv2d_loops(x, w, b, stride, padding):
    """Direct cross-correlation, ``x (B, C, H, W)``, ``w (O, C, kh, kw)``."""
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    xp[:, :, padding:padding + H, padding:padding + W] = x
    Ho = (H + 2 * padding - kh) // stride + 1
    Wo = (W + 2 * padding - kw) // stride + 1
    out = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw]
                    out[n, o, i, j] = np.sum(patch * w[o]) + (b[o] if b is not None else 0.0)
    return out


def conv_transpose2d_loops(x, w, b, stride, padding):
    """Scatter form of the transposed convolution, ``w (Cin, Cout, kh, kw)``."""
    B, C, H, W = x.shape
    _, O, kh, kw = w.shape
    full = np.zeros((B, O, (H - 1) * stride + kh, (W - 1) * stride + kw))
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    full[n, :, i * stride:i * stride + kh, j * stride:j * stride + kw] += x[n, c, i, j] * w[c]
    out = full[:, :, padding:full.shape[2] - padding, padding:full.shape[3] - padding]
    if b is not None:
        out = out + b[None, :, None, None]
    return out


def tv_loops(img):
    """Sum of |right - here| and |below - here| over valid neighbours of one ``(C, H, W)`` image."""
    C, H, W = img.shape
    total = 0.0
    for c in range(C):
        for h in range(H):
            for w in range(W):
                if w + 1 < W:
                    total += abs(img[c, h, w + 1] - img[c, h, w])
                if h + 1 < H:
                    total += abs(img[c, h + 1, w] - img[c, h, w])
    return total


def mean_pool_loops(img, size):
    C, H, W = img.shape
    f = H // size
    out = np.zeros((C, size, size))
    for c in range(C):
        for i in range(size):
            for j in range(size):
                out[c, i, j] = img[c, i * f:(i + 1) * f, j * f:(j + 1) * f].mean()
    return out


def rank1_loops(probes, probe_ids, gallery, gallery_ids):
    """Count of probes whose highest-cosine gallery entry shares their identity."""
    hits = 0
    for p, pid in zip(probes, probe_ids):
        best, best_id = -math.inf, None
        for g, gid in zip(gallery, gallery_ids):
            cos = float(np.dot(p, g) / (np.linalg.norm(p) * np.linalg.norm(g)))
            if cos > best:
                best, best_id = cos, gid
        hits += int(best_id == pid)
    return hits
