import math

import numpy as np
import pytest

from lidar_uda.errors import ValidationError
from lidar_uda.metrics import ConfusionMatrix, accumulate, iou, write_report
from lidar_uda.model import Prediction


def _iou_reference(y, yhat, C, ignore):
    vals = []
    for c in range(C):
        if c == ignore:
            continue
        m = y != ignore
        inter = np.sum((y == c) & (yhat == c) & m)
        union = np.sum(((y == c) | (yhat == c)) & m)
        if union:
            vals.append(inter / union)
    return float(np.mean(vals))


def test_perfect_prediction():
    y = np.array([0, 1, 2, 2])
    cm = accumulate(ConfusionMatrix.empty(3), y, y)
    per, m = iou(cm)
    assert m == 1.0 and per.tolist() == [1.0, 1.0, 1.0]


def test_absent_class_excluded_and_ignore_dropped():
    y = np.array([0, 0, 1, 3, 3])
    yhat = np.array([0, 1, 1, 0, 2])
    cm = accumulate(ConfusionMatrix.empty(4, ignore_index=3), y, yhat)
    per, m = iou(cm)
    assert math.isnan(per[2]) and math.isnan(per[3])
    assert m == pytest.approx((0.5 + 0.5) / 2)


def test_matches_reference_on_random_data():
    rng = np.random.default_rng(0)
    for _ in range(20):
        y, yhat = rng.integers(0, 6, 500), rng.integers(0, 6, 500)
        cm = accumulate(ConfusionMatrix.empty(6, 5), y, yhat)
        assert iou(cm)[1] == pytest.approx(_iou_reference(y, yhat, 6, 5), abs=1e-12)


def test_accumulation_is_additive():
    rng = np.random.default_rng(1)
    y, yhat = rng.integers(0, 4, 100), rng.integers(0, 4, 100)
    a = accumulate(ConfusionMatrix.empty(4), y[:40], yhat[:40])
    b = accumulate(ConfusionMatrix.empty(4), y[40:], yhat[40:])
    whole = accumulate(ConfusionMatrix.empty(4), y, yhat)
    assert np.array_equal((a + b).counts, whole.counts)


def test_prediction_argmax_and_errors():
    P = Prediction(np.array([[0.5, 0.5], [0.1, 0.9]]), np.zeros((2, 2)))
    cm = accumulate(ConfusionMatrix.empty(2), np.array([0, 1]), P)
    assert iou(cm)[1] == 1.0
    with pytest.raises(ValidationError):
        accumulate(ConfusionMatrix.empty(2), np.array([0]), P)
    with pytest.raises(ValidationError):
        iou(ConfusionMatrix.empty(3))


def test_report(tmp_path):
    cm = accumulate(ConfusionMatrix.empty(3, 2), np.array([0, 1, 2]), np.array([0, 0, 1]))
    m = write_report(cm, ["a", "b", "x"], tmp_path / "r.csv")
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines[0] == "class,iou,support"
    assert lines[1] == "a,0.5,1" and lines[2] == "b,0.0,1" and lines[3] == "x,,0"
    assert lines[4] == f"mIoU,{m!r},2"
