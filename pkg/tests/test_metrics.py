"""Tests for overlap metrics and the boundary distance."""
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pbeunet import metrics
from pbeunet.errors import ShapeError
from pbeunet.tensor import Tensor

masks = arrays(dtype=bool, shape=(12, 12), elements=st.booleans())


@pytest.fixture
def confusion_pair():
    """8x8 maps with tp=8, fp=2, fn=2, tn=52."""
    gt = np.zeros((8, 8))
    pred = np.zeros((8, 8))
    gt.flat[:10] = 1.0
    pred.flat[2:12] = 1.0
    return pred, gt


def test_confusion_counts(confusion_pair):
    counts = metrics.confusion(*confusion_pair)
    assert (counts.tp, counts.fp, counts.fn, counts.tn) == (8, 2, 2, 52)
    assert counts.total == 64


def test_ratios_fixture(confusion_pair):
    report = metrics.evaluate(*confusion_pair)
    assert report.dice == pytest.approx(0.8)
    assert report.iou == pytest.approx(2 / 3)
    assert report.recall == pytest.approx(0.8)
    assert report.accuracy == pytest.approx(60 / 64)


def test_threshold_is_strict():
    prob = np.array([[0.5, 0.5000001]])
    assert metrics.binarize(prob).tolist() == [[False, True]]


def test_empty_maps_agree_perfectly():
    report = metrics.evaluate(np.zeros((6, 6)), np.zeros((6, 6)))
    assert (report.dice, report.iou, report.recall, report.accuracy) == (1.0, 1.0, 1.0, 1.0)
    assert report.hd95 == 0.0


def test_one_empty_boundary_is_undefined():
    gt = np.zeros((6, 6))
    gt[2:4, 2:4] = 1.0
    report = metrics.evaluate(np.zeros((6, 6)), gt, sample_id="case_a")
    assert math.isinf(report.hd95)
    assert not report.hd95_defined
    assert report.recall == 0.0
    assert json.loads(report.model_dump_json())["hd95"] is None


def test_three_four_five():
    pred = np.zeros((10, 10))
    gt = np.zeros((10, 10))
    pred[0, 0] = 1.0
    gt[3, 4] = 1.0
    assert metrics.hd95(pred, gt) == pytest.approx(5.0)


def test_identical_masks_have_zero_distance():
    mask = np.zeros((16, 16))
    mask[3:11, 5:14] = 1.0
    assert metrics.hd95(mask, mask) == 0.0


def test_nearest_rank_percentile():
    assert metrics.nearest_rank(np.arange(1, 21, dtype=float)) == 19.0
    assert metrics.nearest_rank(np.arange(1, 101, dtype=float)) == 95.0
    assert metrics.nearest_rank(np.array([7.0])) == 7.0


def test_accepts_single_map_tensors():
    mask = np.zeros((1, 1, 8, 8))
    mask[0, 0, 2:6, 2:6] = 1.0
    assert metrics.hd95(Tensor(mask), Tensor(mask)) == 0.0
    with pytest.raises(ShapeError):
        metrics.hd95(np.zeros((2, 1, 8, 8)), np.zeros((2, 1, 8, 8)))


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        metrics.confusion(np.zeros((4, 4)), np.zeros((4, 5)))


def test_distance_transform_matches_all_pairs():
    rng = np.random.default_rng(0)
    for _ in range(200):
        pred = rng.uniform(size=(32, 32)) > rng.uniform(0.3, 0.9)
        gt = rng.uniform(size=(32, 32)) > rng.uniform(0.3, 0.9)
        assert metrics.hd95(pred, gt) == pytest.approx(metrics.hd95_bruteforce(pred, gt), abs=1e-9)


def test_translation_invariance():
    pred = np.zeros((24, 24))
    gt = np.zeros((24, 24))
    pred[4:10, 3:12] = 1.0
    gt[6:13, 5:9] = 1.0
    moved = metrics.hd95(np.roll(pred, (5, 4), axis=(0, 1)), np.roll(gt, (5, 4), axis=(0, 1)))
    assert moved == pytest.approx(metrics.hd95(pred, gt))


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_hd95_is_symmetric(a, b):
    assert metrics.hd95(a, b) == metrics.hd95(b, a)


@settings(max_examples=60, deadline=None)
@given(masks, masks)
def test_dice_follows_from_iou(a, b):
    report = metrics.evaluate(a.astype(float), b.astype(float))
    assert report.dice == pytest.approx(2 * report.iou / (1 + report.iou))
    assert 0.0 <= report.iou <= report.dice <= 1.0


def test_aggregate_skips_undefined_distances():
    full = np.zeros((8, 8))
    full[2:6, 2:6] = 1.0
    reports = [
        metrics.evaluate(full, full, "a"),
        metrics.evaluate(np.zeros((8, 8)), full, "b"),
    ]
    summary = metrics.aggregate(reports)
    assert summary.count == 2
    assert summary.dice == pytest.approx(0.5)
    assert summary.hd95 == 0.0
    assert summary.hd95_undefined == 1


def test_aggregate_of_nothing():
    summary = metrics.aggregate([])
    assert summary.count == 0
    assert summary.hd95 is None
