"""Gaussian heatmap targets, top-k decoding and the keypoint losses.

Heatmaps are indexed ``[row, col]`` = ``[y, x]``; offset maps carry
``(dx, dy)`` in their last axis.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import ShapeError

ALPHA = 2.0
BETA = 4.0
LAMBDA_OFF = 0.55
EPS = 1e-7


@dataclass
class TargetMaps:
    heatmap: np.ndarray   # (H/g, W/g)
    offsets: np.ndarray   # (H/g, W/g, 2)
    mask: np.ndarray      # (H/g, W/g) bool
    g: int = 4


@dataclass(frozen=True)
class Detection:
    x: float
    y: float
    confidence: float


@dataclass(frozen=True)
class LossTerms:
    l_k: float
    l_off: float
    l_total: float
    lambda_off: float = LAMBDA_OFF


def gaussian_radius(box_w, box_h, min_overlap=0.7):
    """Largest corner jitter that keeps IoU >= min_overlap, floored at 1.

    Three cases: both corners shifted the same way, box shrunk inward, box
    grown outward; the binding one is the smallest root.
    """
    if not 0 < min_overlap < 1:
        raise ValueError(f"min_overlap must lie in (0, 1), got {min_overlap}")
    if box_w <= 0 or box_h <= 0:
        raise ValueError("box sides must be positive")
    w, h, t = float(box_w), float(box_h), float(min_overlap)

    # (h - r)(w - r) >= 2t/(1+t) * hw
    b1, c1 = w + h, w * h * (1 - t) / (1 + t)
    r1 = (b1 - math.sqrt(b1 * b1 - 4 * c1)) / 2
    # (h - 2r)(w - 2r) >= t * hw
    b2, c2 = 2 * (w + h), (1 - t) * w * h
    r2 = (b2 - math.sqrt(b2 * b2 - 16 * c2)) / 8
    # hw >= t (h + 2r)(w + 2r)
    a3, b3, c3 = 4 * t, 2 * t * (w + h), (t - 1) * w * h
    r3 = (-b3 + math.sqrt(b3 * b3 - 4 * a3 * c3)) / (2 * a3)
    return max(1.0, min(r1, r2, r3))


def encode_target(keypoints, width, height, g=4, radius=1.0, sigma=None, dtype=np.float32):
    """Build TargetMaps for one image.  ``keypoints`` is (x, y) or a list of them."""
    if width % g or height % g:
        raise ShapeError(f"downsample factor {g} must divide {width}x{height}")
    pts = np.asarray(keypoints, dtype=np.float64).reshape(-1, 2)
    hw, hh = width // g, height // g
    heat = np.zeros((hh, hw), dtype=np.float64)
    offsets = np.zeros((hh, hw, 2), dtype=np.float64)
    mask = np.zeros((hh, hw), dtype=bool)
    sigma = radius / 3.0 if sigma is None else sigma
    reach = int(math.ceil(radius))
    for x, y in pts:
        if not (0 <= x < width and 0 <= y < height):
            raise ValueError(f"keypoint ({x}, {y}) outside {width}x{height}")
        cx, cy = int(math.floor(x / g)), int(math.floor(y / g))
        _kernels.draw_gaussian(heat, cx, cy, sigma, reach)
        heat[cy, cx] = 1.0
        offsets[cy, cx] = (x / g - cx, y / g - cy)
        mask[cy, cx] = True
    return TargetMaps(heat.astype(dtype), offsets.astype(dtype), mask, g)


def decode_topk(heatmap, offsets, g=4, k=1):
    """Top-k local maxima of ``heatmap`` mapped back to image pixels.

    Ties break toward the lowest row-major index.
    """
    heat = np.asarray(heatmap, dtype=np.float64)
    if heat.size == 0:
        raise ShapeError("empty heatmap")
    if k < 1:
        raise ValueError("k must be >= 1")
    hh, hw = heat.shape
    keep = _kernels.local_max(heat)
    flat = np.where(keep, heat, -np.inf).ravel()
    order = np.argsort(-flat, kind="stable")[:k]
    limit_x = np.nextafter(hw * g, 0)
    limit_y = np.nextafter(hh * g, 0)
    out = []
    for idx in order:
        if not np.isfinite(flat[idx]):
            break
        cy, cx = divmod(int(idx), hw)
        ox, oy = float(offsets[cy, cx, 0]), float(offsets[cy, cx, 1])
        x = float(np.clip((cx + ox) * g, 0.0, limit_x))
        y = float(np.clip((cy + oy) * g, 0.0, limit_y))
        out.append(Detection(x, y, float(np.clip(heat[cy, cx], 0.0, 1.0))))
    return out


def focal_loss(pred, target, n_keypoints, alpha=ALPHA, beta=BETA, eps=EPS):
    """Penalty-reduced focal loss and its gradient w.r.t. ``pred``.

    Cells with target exactly 1 are positives.  Predictions are clamped to
    [eps, 1 - eps]; the gradient is zero where the clamp is active.
    """
    if n_keypoints <= 0:
        raise ValueError("focal loss needs at least one keypoint")
    raw = np.asarray(pred)
    p = np.clip(raw, eps, 1 - eps)
    f = np.asarray(target)
    pos = f == 1
    one_m = 1 - p
    log_p, log_1m = np.log(p), np.log(one_m)
    neg_w = (1 - f) ** beta
    pos_term = one_m ** alpha * log_p
    neg_term = neg_w * p ** alpha * log_1m
    loss = -np.where(pos, pos_term, neg_term).sum() / n_keypoints

    d_pos = -alpha * one_m ** (alpha - 1) * log_p + one_m ** alpha / p
    d_neg = neg_w * (alpha * p ** (alpha - 1) * log_1m - p ** alpha / one_m)
    grad = -np.where(pos, d_pos, d_neg) / n_keypoints
    grad = np.where((raw < eps) | (raw > 1 - eps), 0, grad).astype(raw.dtype, copy=False)
    return float(loss), grad


def offset_loss(pred, target, mask):
    """Mean absolute error over masked cells (both components)."""
    m = np.asarray(mask, dtype=bool)
    count = int(m.sum()) * pred.shape[-1]
    if count == 0:
        raise ValueError("offset loss needs at least one masked cell")
    diff = pred - target
    loss = float(np.abs(diff[m]).sum() / count)
    grad = np.where(m[..., None], np.sign(diff), 0).astype(pred.dtype) / count
    return loss, grad


def total_loss(l_k, l_off, lambda_off=LAMBDA_OFF):
    return l_k + lambda_off * l_off


# --------------------------------------------------------- detections file


def save_detections(path, patient, per_slice, fold=None):
    """``per_slice`` maps z -> list[Detection]."""
    obj = {"patient": patient, "slices": [
        {"z": int(z), "detections": [
            {"x": d.x, "y": d.y, "confidence": d.confidence} for d in dets]}
        for z, dets in sorted(per_slice.items())]}
    if fold is not None:
        obj["fold"] = int(fold)
    Path(path).write_text(json.dumps(obj, indent=1) + "\n")


def load_detections(path):
    obj = json.loads(Path(path).read_text())
    per_slice = {int(s["z"]): [Detection(float(d["x"]), float(d["y"]), float(d["confidence"]))
                               for d in s["detections"]]
                 for s in obj["slices"]}
    return obj["patient"], per_slice, obj.get("fold")
