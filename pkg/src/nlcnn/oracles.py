"""Slow, literal reference implementations used to cross-check the fast paths.

Each works on plain float64 numpy arrays with explicit loops and shares no
code with the vectorised operations it checks.
"""

from __future__ import annotations

import math

import numpy as np


def matmul_loop(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def conv2d_loop(x, w, stride=(1, 1), padding=(0, 0)) -> np.ndarray:
    """Sliding-window cross-correlation over an NCHW input."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    Ho = (H + 2 * ph - kh) // sh + 1
    Wo = (W + 2 * pw - kw) // sw + 1
    out = np.zeros((N, O, Ho, Wo))
    for n in range(N):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for c in range(C):
                        for di in range(kh):
                            for dj in range(kw):
                                r = i * sh + di - ph
                                s = j * sw + dj - pw
                                if 0 <= r < H and 0 <= s < W:
                                    acc += x[n, c, r, s] * w[o, c, di, dj]
                    out[n, o, i, j] = acc
    return out


def softmax_direct(v) -> np.ndarray:
    """exp / sum exp along the last axis, one row at a time."""
    v = np.asarray(v, dtype=np.float64)
    flat = v.reshape(-1, v.shape[-1])
    out = np.empty_like(flat)
    for r, row in enumerate(flat):
        e = [math.exp(x) for x in row]
        total = math.fsum(e)
        out[r] = [x / total for x in e]
    return out.reshape(v.shape)


def batchnorm_formula(x, gamma, beta, eps=1e-5) -> np.ndarray:
    """(x - mean) / sqrt(var + eps) * gamma + beta with per-channel batch statistics (NCHW)."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for c in range(x.shape[1]):
        vals = x[:, c].ravel()
        mu = math.fsum(vals) / vals.size
        var = math.fsum((vals - mu) ** 2) / vals.size
        out[:, c] = (x[:, c] - mu) / math.sqrt(var + eps) * gamma[c] + beta[c]
    return out


def dft_naive(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.complex128)
    n = x.shape[-1]
    k = np.arange(n)
    basis = np.exp(-2j * np.pi * np.outer(k, k) / n)
    return x @ basis.T


def sap_loop(frames, weight, bias, context) -> np.ndarray:
    """Attentive pooling of N x T x C frame vectors, one frame at a time."""
    frames = np.asarray(frames, dtype=np.float64)
    N, T, C = frames.shape
    out = np.zeros((N, C))
    for n in range(N):
        scores = []
        for t in range(T):
            h = np.tanh(frames[n, t] @ weight + bias)
            scores.append(float(h @ context[:, 0]))
        top = max(scores)
        e = [math.exp(s - top) for s in scores]
        total = math.fsum(e)
        for t in range(T):
            out[n] += (e[t] / total) * frames[n, t]
    return out


def eer_exhaustive(scores, labels):
    """Try every candidate threshold independently; O(n^2).

    Returns ``(eer, threshold)`` using the same selection rule as the fast
    sweep: minimal |FAR - FRR|, then minimal FAR + FRR, then lowest threshold.
    """
    scores = [float(s) for s in scores]
    labels = [int(l) for l in labels]
    n_tar = sum(labels)
    n_non = len(labels) - n_tar
    best = None
    for t in sorted(set(scores)):
        fa = sum(1 for s, l in zip(scores, labels) if l == 0 and s >= t)
        fr = sum(1 for s, l in zip(scores, labels) if l == 1 and s < t)
        key = (abs(fa * n_tar - fr * n_non), fa * n_tar + fr * n_non, t)
        if best is None or key < best[0]:
            best = (key, 0.5 * (fa / n_non + fr / n_tar), t)
    return best[1], best[2]


def mean_pair_cosine_loop(emb_a, emb_b) -> float:
    total = 0.0
    count = 0
    for a in np.asarray(emb_a, dtype=np.float64):
        for b in np.asarray(emb_b, dtype=np.float64):
            total += float(a @ b) / (math.sqrt(float(a @ a)) * math.sqrt(float(b @ b)))
            count += 1
    return total / count
