"""Brute-force reference computations, independent of the package code."""

import numpy as np


def grid_search_line(z, v, span=50.0, points=21, rounds=40):
    """Minimise sum (v - k z - b)^2 by repeatedly zoomed grid search over (k, b)."""
    z = np.asarray(z, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    k0, b0 = 0.0, float(v.mean())
    sk, sb = 5.0, span
    for _ in range(rounds):
        ks = k0 + np.linspace(-sk, sk, points)
        bs = b0 + np.linspace(-sb, sb, points)
        resid = v[None, None, :] - ks[:, None, None] * z[None, None, :] - bs[None, :, None]
        q = (resid * resid).sum(axis=2)
        i, j = np.unravel_index(np.argmin(q), q.shape)
        k0, b0 = ks[i], bs[j]
        sk, sb = sk / 3.0, sb / 3.0
    return k0, b0


def envelope_ap_fine(recall, precision, step=1e-4):
    """Integrate max-precision-at-recall->=r by right-endpoint steps of ``step``."""
    recall = np.asarray(recall, dtype=np.float64)
    precision = np.asarray(precision, dtype=np.float64)
    n = int(round(1 / step))
    total = 0.0
    for i in range(1, n + 1):
        r = i * step
        sel = precision[recall >= r - 1e-12]
        total += (sel.max() if sel.size else 0.0) * step
    return total


def pr_points(conf, tp, n_gt):
    """Precision/recall after each prediction, confidence descending (stable)."""
    order = np.argsort(-np.asarray(conf), kind="stable")
    hits = np.asarray(tp, dtype=float)[order]
    ctp = np.cumsum(hits)
    k = np.arange(1, len(hits) + 1)
    return ctp / n_gt, ctp / k


def rect_iou(ax, ay, bx, by, size):
    """IoU of two axis-aligned squares of side ``size`` by rectangle overlap."""
    ox = max(0.0, size - abs(ax - bx))
    oy = max(0.0, size - abs(ay - by))
    inter = ox * oy
    return inter / (2 * size * size - inter)
