"""Keypoint boxes, greedy IoU matching, AP, fold splits and distance histograms.

Predictions and ground truth are keyed by ``(patient, z)``.  Every aggregate
is computed after sorting those keys, so file order never changes a number.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EvaluationError, TrackError
from .heatmap import Detection
from .volume import KeypointTrack

BOX_SIZE = 21.0
BIN_WIDTH = 5.0
DEFAULT_THRESHOLDS = (0.5, 0.75)


def keypoint_box(point, size=BOX_SIZE):
    """(x0, y0, x1, y1) square of side ``size`` centered on ``point``."""
    if size <= 0:
        raise ValueError("box size must be positive")
    x, y = float(point[0]), float(point[1])
    h = size / 2.0
    return (x - h, y - h, x + h, y + h)


def iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union


@dataclass
class MatchResult:
    confidences: np.ndarray   # one per prediction, in matching order
    tp: np.ndarray            # bool, same order
    n_gt: int

    @property
    def n_tp(self):
        return int(self.tp.sum())

    @property
    def n_fp(self):
        return int(len(self.tp) - self.tp.sum())

    @property
    def n_fn(self):
        return self.n_gt - self.n_tp


def _pred_order(preds):
    # confidence descending; position breaks ties so equal inputs give equal output
    return sorted(range(len(preds)),
                  key=lambda i: (-preds[i].confidence, preds[i].x, preds[i].y, i))


def match_predictions(preds, gts, iou_threshold, box_size=BOX_SIZE):
    """Greedy one-to-one matching of Detections to gt points within one image."""
    gt_boxes = [keypoint_box(g, box_size) for g in gts]
    taken = [False] * len(gts)
    order = _pred_order(preds)
    conf = np.array([preds[i].confidence for i in order], dtype=np.float64)
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        box = keypoint_box((preds[i].x, preds[i].y), box_size)
        best, best_j = -1.0, -1
        for j, gb in enumerate(gt_boxes):
            if taken[j]:
                continue
            v = iou(box, gb)
            if v > best:
                best, best_j = v, j
        if best_j >= 0 and best >= iou_threshold:
            taken[best_j] = True
            tp[rank] = True
    return MatchResult(conf, tp, len(gts))


def pr_curve(matches):
    """Cumulative (recall, precision) over all predictions, confidence descending."""
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        raise EvaluationError("average precision needs at least one ground truth")
    conf = np.concatenate([m.confidences for m in matches]) if matches else np.zeros(0)
    tp = np.concatenate([m.tp for m in matches]) if matches else np.zeros(0, bool)
    order = np.argsort(-conf, kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, 1)
    return recall, precision


def average_precision(matches, mode="all"):
    """AP from a list of MatchResults -> (ap, recall, precision).

    ``mode="all"`` integrates the monotone precision envelope exactly;
    ``mode="11"`` averages it at recall 0, 0.1, ..., 1.
    """
    recall, precision = pr_curve(matches)
    if mode == "11":
        pts = []
        for r in np.linspace(0, 1, 11):
            sel = precision[recall >= r - 1e-12]
            pts.append(sel.max() if sel.size else 0.0)
        return float(np.mean(pts)), recall, precision
    if mode != "all":
        raise ValueError(f"unknown AP mode {mode!r}")
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.flatnonzero(mrec[1:] != mrec[:-1])
    ap = float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))
    return ap, recall, precision


def distance_histogram(distances, bin_width=BIN_WIDTH):
    """Counts over [0, w), [w, 2w), ... -> list of (start, end, count)."""
    if bin_width <= 0:
        raise ValueError("bin width must be positive")
    d = np.asarray(distances, dtype=np.float64)
    if d.size == 0:
        return []
    idx = np.floor(d / bin_width).astype(int)
    counts = np.bincount(idx)
    return [(i * bin_width, (i + 1) * bin_width, int(c)) for i, c in enumerate(counts)]


def five_fold_split(patient_ids, seed=0, n_folds=5):
    """Seeded patient-level partition into ``n_folds`` near-equal folds."""
    ids = sorted(set(patient_ids))
    if len(ids) != len(list(patient_ids)):
        raise EvaluationError("duplicate patient ids")
    if len(ids) < n_folds:
        raise EvaluationError(f"need at least {n_folds} patients, got {len(ids)}")
    perm = np.random.default_rng(seed).permutation(len(ids))
    return [[ids[i] for i in part] for part in np.array_split(perm, n_folds)]


def mean_std_text(values, ddof=0):
    """Percent-scaled "mean±std" string, e.g. ``34.3±2.2684``."""
    v = np.asarray(values, dtype=np.float64) * 100
    std = float(v.std(ddof=ddof)) if len(v) > ddof else 0.0
    return f"{v.mean():.1f}±{std:.4f}", float(v.mean()), std


# -------------------------------------------------------------- the report


@dataclass
class EvalReport:
    thresholds: tuple
    ap: dict                       # threshold -> AP
    pr: dict                       # threshold -> list of (recall, precision)
    histogram: list                # (start, end, count)
    distances: list = field(repr=False, default_factory=list)
    n_gt: int = 0
    n_pred: int = 0
    folds: dict = field(default_factory=dict)     # fold -> {threshold: AP}
    summary: dict = field(default_factory=dict)   # threshold -> {mean, std, text}

    def within(self, radius):
        d = np.asarray(self.distances)
        return float(np.mean(d < radius)) if d.size else 0.0

    def to_json(self):
        key = _tkey
        return {
            "thresholds": list(self.thresholds),
            "ap": {key(t): v for t, v in self.ap.items()},
            "pr": {key(t): [[float(r), float(p)] for r, p in c] for t, c in self.pr.items()},
            "histogram": {"bin_width": (self.histogram[0][1] - self.histogram[0][0])
                          if self.histogram else BIN_WIDTH,
                          "bins": [list(b) for b in self.histogram]},
            "distances": [float(d) for d in self.distances],
            "n_gt": self.n_gt,
            "n_pred": self.n_pred,
            "folds": {str(f): {key(t): v for t, v in aps.items()}
                      for f, aps in sorted(self.folds.items())},
            "summary": {key(t): s for t, s in self.summary.items()},
        }

    @classmethod
    def from_json(cls, obj):
        val = float
        try:
            return cls(
                thresholds=tuple(obj["thresholds"]),
                ap={val(t): v for t, v in obj["ap"].items()},
                pr={val(t): [tuple(p) for p in c] for t, c in obj["pr"].items()},
                histogram=[tuple(b) for b in obj["histogram"]["bins"]],
                distances=list(obj.get("distances", [])),
                n_gt=obj["n_gt"], n_pred=obj["n_pred"],
                folds={int(f): {val(t): v for t, v in a.items()} for f, a in obj["folds"].items()},
                summary={val(t): s for t, s in obj["summary"].items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise EvaluationError(f"malformed report: {exc}") from exc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")


def _tkey(t):
    return f"{float(t):g}"


def evaluate_records(preds, gts, thresholds=DEFAULT_THRESHOLDS, folds=None,
                     box_size=BOX_SIZE, bin_width=BIN_WIDTH, ap_mode="all", ddof=0):
    """Evaluate in-memory records.

    ``preds``: {(patient, z): [Detection, ...]}; ``gts``: {(patient, z): (x, y)};
    ``folds``: optional {patient: fold}.  Slices with predictions but no ground
    truth contribute false positives only.
    """
    if not gts:
        raise EvaluationError("no ground truth to evaluate")
    keys = sorted(set(gts) | set(preds), key=lambda k: (str(k[0]), int(k[1])))
    thresholds = tuple(float(t) for t in thresholds)

    def run(sel):
        out, curves = {}, {}
        for t in thresholds:
            ms = [match_predictions(preds.get(k, []), [gts[k]] if k in gts else [], t, box_size)
                  for k in sel]
            ap, rec, prec = average_precision(ms, ap_mode)
            out[t] = ap
            curves[t] = list(zip(rec.tolist(), prec.tolist()))
        return out, curves

    ap, curves = run(keys)
    distances = []
    for k in keys:
        if k in gts and preds.get(k):
            top = preds[k][_pred_order(preds[k])[0]]
            distances.append(math.hypot(top.x - gts[k][0], top.y - gts[k][1]))
    report = EvalReport(thresholds, ap, curves, distance_histogram(distances, bin_width),
                        distances, n_gt=sum(1 for k in keys if k in gts),
                        n_pred=sum(len(preds.get(k, [])) for k in keys))
    if folds:
        by_fold = {}
        for k in keys:
            if k[0] not in folds:
                raise EvaluationError(f"patient {k[0]!r} has no fold")
            by_fold.setdefault(int(folds[k[0]]), []).append(k)
        for f, sel in sorted(by_fold.items()):
            if not any(k in gts for k in sel):
                raise EvaluationError(f"fold {f} has no ground truth")
            report.folds[f] = run(sel)[0]
        for t in thresholds:
            text, mean, std = mean_std_text([report.folds[f][t] for f in sorted(report.folds)], ddof)
            report.summary[t] = {"mean": mean, "std": std, "text": text}
    return report


# ----------------------------------------------------------------- files


def load_prediction_file(path):
    """Detections JSON, or a track JSON (confidence 1 per point) -> (patient, per_slice, fold)."""
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise EvaluationError(f"cannot read predictions {path}: {exc}") from exc
    if "slices" in obj:
        per = {int(s["z"]): [Detection(float(d["x"]), float(d["y"]), float(d["confidence"]))
                             for d in s["detections"]] for s in obj["slices"]}
    elif "points" in obj:
        track = _track(obj, path)
        per = {int(round(z)): [Detection(float(x), float(y), 1.0)] for x, y, z in track.points}
    else:
        raise EvaluationError(f"{path}: neither detections nor a track")
    return str(obj["patient"]), per, obj.get("fold")


def load_gt_file(path):
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise EvaluationError(f"cannot read ground truth {path}: {exc}") from exc
    track = _track(obj, path)
    return track.patient, {int(round(z)): (float(x), float(y)) for x, y, z in track.points}


def _track(obj, path):
    try:
        return KeypointTrack.from_json(obj)
    except TrackError as exc:
        raise EvaluationError(f"{path}: {exc}") from exc


def evaluate(pred_files, gt_files, thresholds=DEFAULT_THRESHOLDS, **kwargs):
    """Evaluate prediction files against track files; patient ids must agree."""
    pred_files, gt_files = sorted(map(str, pred_files)), sorted(map(str, gt_files))
    if not pred_files or not gt_files:
        raise EvaluationError("empty input")
    preds, gts, folds = {}, {}, {}
    seen_pred, seen_gt = set(), set()
    for p in pred_files:
        patient, per, fold = load_prediction_file(p)
        if patient in seen_pred:
            raise EvaluationError(f"duplicate predictions for patient {patient!r}")
        seen_pred.add(patient)
        if fold is not None:
            folds[patient] = fold
        for z, dets in per.items():
            preds[(patient, z)] = dets
    for g in gt_files:
        patient, per = load_gt_file(g)
        if patient in seen_gt:
            raise EvaluationError(f"duplicate ground truth for patient {patient!r}")
        seen_gt.add(patient)
        for z, xy in per.items():
            gts[(patient, z)] = xy
    if seen_pred != seen_gt:
        missing = sorted(seen_pred ^ seen_gt)
        raise EvaluationError(f"patient ids differ between predictions and ground truth: {missing}")
    if folds and len(folds) != len(seen_pred):
        raise EvaluationError("fold tags must be given for all prediction files or none")
    return evaluate_records(preds, gts, thresholds, folds or None, **kwargs)
