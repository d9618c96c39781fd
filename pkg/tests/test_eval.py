import numpy as np
import pytest

from stereolidar.evaluation import (
    EvalConfig,
    Flag,
    average_precision,
    difficulty_filter,
    evaluate,
    evaluate_frame,
    format_report,
    interpolated_ap,
    recall_points,
)
from stereolidar.geometry import Box3D
from stereolidar.kitti_io import LabelRecord


def _rec(x, score=None, height=50.0, occluded=0, truncated=0.0, type_="Car"):
    box = Box3D(x, 1.6, 20.0, 1.6, 1.5, 3.9, 0.0)
    return LabelRecord.from_box(box, type_, bbox=(100.0, 100.0, 150.0, 100.0 + height), score=score,
                                truncated=truncated, occluded=occluded)


def test_recall_points():
    assert np.allclose(recall_points(11), np.linspace(0, 1, 11))
    assert recall_points(40)[0] == 1 / 40 and recall_points(40)[-1] == 1.0
    with pytest.raises(ValueError):
        recall_points(20)


def test_interpolated_ap_takes_max_precision_to_the_right():
    p = np.array([1.0, 0.5, 2 / 3])
    r = np.array([0.5, 0.5, 1.0])
    assert interpolated_ap(p, r, 11) == pytest.approx((6 * 1.0 + 5 * (2 / 3)) / 11, abs=1e-12)


def test_difficulty_levels():
    assert difficulty_filter(_rec(0, height=45)) == "easy"
    assert difficulty_filter(_rec(0, height=30, occluded=1)) == "moderate"
    assert difficulty_filter(_rec(0, height=30, occluded=2)) == "hard"
    assert difficulty_filter(_rec(0, height=20)) == "ignored"


def test_duplicate_detection_is_false_positive():
    gts = [_rec(0.0)]
    dets = [_rec(0.0, 0.9), _rec(0.0, 0.8)]
    r = evaluate_frame(dets, gts, "Car", EvalConfig())
    assert r.det_flags == [Flag.TP, Flag.FP]


def test_detection_on_hard_gt_is_ignored_in_easy_slice():
    gts = [_rec(0.0, height=30, occluded=2)]
    r = evaluate_frame([_rec(0.0, 0.9)], gts, "Car", EvalConfig(difficulty="easy"))
    assert r.det_flags == [Flag.IGNORED] and r.num_valid_gt == 0
    assert average_precision([r]) is None


def test_perfect_and_empty_detectors():
    gt = {"0": [_rec(0.0), _rec(10.0)], "1": [_rec(-10.0)]}
    det = {f: [LabelRecord(**{**r.__dict__, "score": 1.0}) for r in v] for f, v in gt.items()}
    for interp in (11, 40):
        rows = evaluate(gt, det, interpolation=interp)
        assert all(row.ap == 1.0 for row in rows)
        assert all(row.ap == 0.0 for row in evaluate(gt, {}, interpolation=interp))


def test_config_validation():
    with pytest.raises(ValueError):
        EvalConfig(criterion="iou2d")
    with pytest.raises(ValueError):
        EvalConfig(iou_thresholds={"Car": 1.5})


def test_report_lists_every_row():
    gt = {"0": [_rec(0.0)]}
    text = format_report(evaluate(gt, {"0": [_rec(0.0, 0.5)]}))
    assert text.count("Car") >= 6
