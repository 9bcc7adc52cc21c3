import json
import re

import numpy as np
import pytest

from oracles import envelope_ap_fine, pr_points, rect_iou
from implantformer.errors import EvaluationError
from implantformer.evaluation import (EvalReport, MatchResult, average_precision,
                                      distance_histogram, evaluate, evaluate_records,
                                      five_fold_split, iou, keypoint_box, match_predictions,
                                      mean_std_text)
from implantformer.heatmap import Detection, save_detections
from implantformer.volume import KeypointTrack, save_track

DIVISORS = [1, 2, 4, 5, 8, 10, 16, 20, 25, 40, 50, 80]   # n_gt | 10000 keeps the oracle exact


def test_keypoint_box():
    assert keypoint_box((100, 100), 21) == (89.5, 89.5, 110.5, 110.5)
    x0, y0, x1, y1 = keypoint_box((3.0, 4.0), 21)
    assert (x1 - x0) * (y1 - y0) == 441
    assert keypoint_box((0, 0), 1) == (-0.5, -0.5, 0.5, 0.5)


def test_iou_examples():
    a = keypoint_box((100, 100))
    assert iou(a, a) == 1.0
    assert iou(a, keypoint_box((105, 100))) == pytest.approx(336 / 546, abs=1e-9)
    assert iou(a, keypoint_box((200, 100))) == 0.0


def test_iou_matches_rectangle_oracle():
    rng = np.random.default_rng(0)
    for _ in range(500):
        ax, ay, bx, by = rng.uniform(0, 40, 4)
        size = rng.uniform(1, 30)
        got = iou(keypoint_box((ax, ay), size), keypoint_box((bx, by), size))
        assert got == pytest.approx(rect_iou(ax, ay, bx, by, size), abs=1e-12)


def test_match_examples():
    gt = [(50.0, 50.0)]
    for t in (0.5, 0.75, 1.0):
        m = match_predictions([Detection(50, 50, 0.9)], gt, t)
        assert (m.n_tp, m.n_fp, m.n_fn) == (1, 0, 0)
    off = [Detection(55, 50, 0.9)]
    assert match_predictions(off, gt, 0.5).n_tp == 1
    assert match_predictions(off, gt, 0.75).n_tp == 0
    m = match_predictions([Detection(50, 50, 0.6), Detection(51, 50, 0.8)], gt, 0.5)
    assert list(m.confidences) == [0.8, 0.6] and list(m.tp) == [True, False]


def test_ap_examples():
    one = [MatchResult(np.array([1.0, 0.9]), np.array([True, True]), 2)]
    assert average_precision(one)[0] == 1.0
    fp_first = [MatchResult(np.array([0.9, 0.8]), np.array([False, True]), 1)]
    assert average_precision(fp_first)[0] == pytest.approx(0.5)
    with pytest.raises(EvaluationError):
        average_precision([MatchResult(np.zeros(1), np.zeros(1, bool), 0)])


def _random_matches(rng):
    n_gt = int(rng.choice(DIVISORS))
    n_pred = int(rng.integers(1, 3 * n_gt + 3))
    tp = np.zeros(n_pred, bool)
    tp[rng.choice(n_pred, size=min(n_gt, n_pred, int(rng.integers(0, n_gt + 1))),
                  replace=False)] = True
    conf = rng.random(n_pred)
    return conf, tp, n_gt


def test_ap_matches_fine_step_oracle():
    rng = np.random.default_rng(42)
    for _ in range(100):
        conf, tp, n_gt = _random_matches(rng)
        ap, _, _ = average_precision([MatchResult(conf, tp, n_gt)])
        rec, prec = pr_points(conf, tp, n_gt)
        assert ap == pytest.approx(envelope_ap_fine(rec, prec), abs=1e-6)


def test_ap_frozen_oracle_value():
    # envelope_ap_fine gave 0.54166666667 (= 13/24) for this hand-built list (4 gts)
    conf = np.array([0.95, 0.9, 0.8, 0.7, 0.6, 0.5])
    tp = np.array([True, False, True, False, False, True])
    ap, rec, prec = average_precision([MatchResult(conf, tp, 4)])
    assert ap == pytest.approx(0.54166666667, abs=1e-9)
    assert np.all(np.diff(rec) >= 0)


def test_eleven_point_mode():
    conf = np.array([0.9, 0.8])
    tp = np.array([False, True])
    ap, _, _ = average_precision([MatchResult(conf, tp, 1)], mode="11")
    assert ap == pytest.approx(0.5)


def _records(rng, n_patients=5, n_slices=6, spread=4.0):
    preds, gts = {}, {}
    for p in range(n_patients):
        for z in range(n_slices):
            gx, gy = rng.uniform(10, 50, 2)
            gts[(f"p{p}", z)] = (gx, gy)
            preds[(f"p{p}", z)] = [Detection(gx + rng.normal(0, spread), gy + rng.normal(0, spread),
                                             float(rng.random())) for _ in range(rng.integers(0, 3))]
    return preds, gts


def test_threshold_monotonicity():
    rng = np.random.default_rng(3)
    for _ in range(100):
        preds, gts = _records(rng)
        r = evaluate_records(preds, gts, (0.5, 0.75))
        assert r.ap[0.75] <= r.ap[0.5] + 1e-12
        for curve in r.pr.values():
            rec = [c[0] for c in curve]
            assert rec == sorted(rec)
            assert all(0 <= a <= 1 and 0 <= b <= 1 for a, b in curve)


def test_perfect_predictions():
    gts = {("a", z): (10.0 + z, 20.0) for z in range(5)}
    preds = {k: [Detection(*v, 0.9)] for k, v in gts.items()}
    r = evaluate_records(preds, gts)
    assert r.ap[0.5] == r.ap[0.75] == 1.0
    assert r.histogram == [(0.0, 5.0, 5)]


def test_distance_histogram():
    assert distance_histogram([np.hypot(5, 5)])[-1] == (5.0, 10.0, 1)
    bins = distance_histogram([0, 4.9, 5, 12, 30])
    assert [b[2] for b in bins] == [2, 1, 1, 0, 0, 0, 1]
    assert sum(b[2] for b in bins) == 5
    assert distance_histogram([]) == []


def test_five_fold_split():
    folds = five_fold_split([f"p{i}" for i in range(10)], seed=1)
    assert [len(f) for f in folds] == [2] * 5
    flat = sorted(sum(folds, []))
    assert flat == sorted(f"p{i}" for i in range(10))
    assert five_fold_split([f"p{i}" for i in range(10)], seed=1) == folds
    sizes = [len(f) for f in five_fold_split(range(203), seed=0)]
    assert max(sizes) - min(sizes) <= 1
    with pytest.raises(EvaluationError):
        five_fold_split(["a", "b", "c", "d"])


def test_mean_std_format():
    text, mean, std = mean_std_text([0.343, 0.32, 0.36, 0.35, 0.34])
    assert re.fullmatch(r"\d+\.\d±\d+\.\d{4}", text)
    assert text == "34.3±1.3230"


def _write_case(tmp_path, preds, gts, folds):
    pred_files, gt_files = [], []
    for patient in sorted({k[0] for k in gts}):
        per = {z: d for (p, z), d in preds.items() if p == patient}
        pts = [(x, y, z) for (p, z), (x, y) in sorted(gts.items()) if p == patient]
        pf, gf = tmp_path / f"{patient}.det.json", tmp_path / f"{patient}.gt.json"
        save_detections(pf, patient, per, folds[patient])
        save_track(KeypointTrack(np.array(pts), "crown", patient), gf)
        pred_files.append(pf)
        gt_files.append(gf)
    return pred_files, gt_files


def test_evaluate_files_and_permutation_invariance(tmp_path):
    rng = np.random.default_rng(5)
    preds, gts = _records(rng, n_patients=10)
    folds = {f"p{i}": i % 5 for i in range(10)}
    pf, gf = _write_case(tmp_path, preds, gts, folds)
    a = evaluate(pf, gf)
    b = evaluate(pf[::-1], list(reversed(gf)))
    assert json.dumps(a.to_json(), sort_keys=True) == json.dumps(b.to_json(), sort_keys=True)
    assert set(a.folds) == set(range(5))
    assert re.fullmatch(r"\d+\.\d±\d+\.\d{4}", a.summary[0.75]["text"])
    ref = evaluate_records(preds, gts, folds=folds)
    assert a.ap == pytest.approx(ref.ap)
    back = EvalReport.from_json(json.loads(json.dumps(a.to_json())))
    assert back.ap == a.ap and back.histogram == a.histogram


def test_evaluate_errors(tmp_path):
    rng = np.random.default_rng(6)
    preds, gts = _records(rng, n_patients=2)
    pf, gf = _write_case(tmp_path, preds, gts, {"p0": 0, "p1": 1})
    with pytest.raises(EvaluationError):
        evaluate(pf[:1], gf)
    with pytest.raises(EvaluationError):
        evaluate([], gf)
