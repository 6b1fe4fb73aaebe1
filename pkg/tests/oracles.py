"""Slow, obviously-correct reference implementations used as test oracles.

None of these import the package; they recompute each quantity from its
definition with plain Python / numpy.
"""
import math

import numpy as np


def top_t_mean(values, t_percent):
    """Mean of the k largest entries; ties at the cutoff by row-major position."""
    flat = list(np.asarray(values, dtype=np.float64).ravel())
    n = len(flat)
    k = max(1, int(math.floor(t_percent / 100.0 * n + 0.5)))
    order = sorted(range(n), key=lambda i: (-flat[i], i))
    return sum(flat[i] for i in order[:k]) / k


def minmax(values):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    return np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)


def greedy_windows(saliency, K, win):
    """Exhaustive per-iteration window search on the class-summed, normalised grid.

    Returns grid positions. Every iteration rescores every window from
    scratch, skipping positions already picked; ties go to the smallest
    (row, col).
    """
    grid = sum(minmax(c) for c in np.asarray(saliency, dtype=np.float64))
    wh, ww = win
    h, w = grid.shape
    picks = []
    for _ in range(K):
        best, best_pos = None, None
        for r in range(h - wh + 1):
            for c in range(w - ww + 1):
                if (r, c) in picks:
                    continue
                s = math.fsum(grid[r:r + wh, c:c + ww].ravel().tolist())
                if best is None or s > best:
                    best, best_pos = s, (r, c)
        picks.append(best_pos)
        r, c = best_pos
        grid[r:r + wh, c:c + ww] = 0.0
    return picks


def pxap_bruteforce(scores, positives):
    """AP over every distinct threshold, recomputing precision/recall from scratch."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    g = np.asarray(positives).ravel() > 0
    n_pos = int(g.sum())
    if n_pos == 0:
        return None
    ap, prev_recall = 0.0, 0.0
    for tau in sorted(set(s.tolist()), reverse=True):
        pred = s >= tau
        tp = int((pred & g).sum())
        precision = tp / int(pred.sum())
        recall = tp / n_pos
        ap += precision * (recall - prev_recall)
        prev_recall = recall
    return ap


def auc_pairwise(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    if not pos or not neg:
        return None
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def dice_formula(s, g):
    s = np.asarray(s, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    num = 2.0 * sum(float(a) * float(b) for a, b in zip(s.ravel(), g.ravel()))
    den = sum(float(a) ** 2 for a in s.ravel()) + sum(float(b) ** 2 for b in g.ravel())
    return 0.0 if den == 0 else num / den


def gated_attention(preds, vecs, V, U, w):
    """Softmax of w . (tanh(V z) * sigmoid(U z)) per instance, in float64 numpy."""
    vecs = np.asarray(vecs, dtype=np.float64)
    scores = []
    for z in vecs:
        a = np.tanh(V @ z)
        b = 1.0 / (1.0 + np.exp(-(U @ z)))
        scores.append(float(w @ (a * b)))
    m = max(scores)
    e = [math.exp(s - m) for s in scores]
    total = sum(e)
    alphas = np.array([x / total for x in e])
    return alphas @ np.asarray(preds, dtype=np.float64), alphas @ vecs, alphas


def nearest_upsample(values, H, W):
    v = np.asarray(values)
    h, w = v.shape[-2:]
    out = np.empty(v.shape[:-2] + (H, W), dtype=v.dtype)
    for i in range(H):
        for j in range(W):
            out[..., i, j] = v[..., (i * h) // H, (j * w) // W]
    return out
