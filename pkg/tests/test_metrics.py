import numpy as np
import pytest

from solarseg import (
    ConfusionCounts,
    DimensionMismatchError,
    MetricsReport,
    ValidationError,
    binarize,
    confusion_counts,
    iou,
)


def iou_set_oracle(pred: np.ndarray, truth: np.ndarray) -> float:
    """IoU via explicit index sets; exact rational arithmetic via ints."""
    p = {tuple(ix) for ix in np.argwhere(pred == 1)}
    t = {tuple(ix) for ix in np.argwhere(truth == 1)}
    union = len(p | t)
    if union == 0:
        return 1.0
    return len(p & t) / union


def test_iou_matches_set_oracle(rng):
    for _ in range(100):
        pred = (rng.uniform(size=(16, 16)) < rng.uniform(0, 1)).astype(np.uint8)
        truth = (rng.uniform(size=(16, 16)) < rng.uniform(0, 1)).astype(np.uint8)
        got = iou(confusion_counts(pred, truth))
        assert got == iou_set_oracle(pred, truth)


def test_empty_vs_empty_is_one():
    z = np.zeros((8, 8), dtype=np.uint8)
    assert iou(confusion_counts(z, z)) == 1.0


def test_empty_vs_nonempty_is_zero():
    z = np.zeros((8, 8), dtype=np.uint8)
    o = np.ones((8, 8), dtype=np.uint8)
    assert iou(confusion_counts(z, o)) == 0.0
    assert iou(confusion_counts(o, z)) == 0.0


def test_confusion_counts_partition_pixels(rng):
    pred = (rng.uniform(size=(12, 12)) < 0.5).astype(np.uint8)
    truth = (rng.uniform(size=(12, 12)) < 0.3).astype(np.uint8)
    c = confusion_counts(pred, truth)
    assert c.total == 144
    assert c.tp == int(np.sum(pred & truth))
    assert c.fp == int(np.sum(pred & (1 - truth)))
    assert c.fn == int(np.sum((1 - pred) & truth))


def test_binarize_tie_maps_to_one():
    probs = np.array([0.49999, 0.5, 0.50001])
    assert binarize(probs, 0.5).tolist() == [0, 1, 1]
    assert binarize(probs, 0.5).dtype == np.uint8


def test_binarize_threshold_monotone(rng):
    for _ in range(100):
        probs = rng.uniform(size=(8, 8))
        t1, t2 = sorted(rng.uniform(0.05, 0.95, size=2))
        lo = binarize(probs, t1)
        hi = binarize(probs, t2)
        assert np.all(hi <= lo)  # raising the threshold never adds pixels


def test_binarize_validation():
    with pytest.raises(ValidationError):
        binarize(np.array([0.5]), threshold=0.0)
    with pytest.raises(ValidationError):
        binarize(np.array([np.nan]), threshold=0.5)


def test_confusion_validation():
    with pytest.raises(DimensionMismatchError):
        confusion_counts(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(ValidationError):
        confusion_counts(np.full((2, 2), 2), np.zeros((2, 2)))


def test_counts_accumulate():
    a = ConfusionCounts(tp=1, fp=2, fn=3, tn=4)
    a.add(ConfusionCounts(tp=10, fp=20, fn=30, tn=40))
    assert (a.tp, a.fp, a.fn, a.tn) == (11, 22, 33, 44)


def test_report_json_roundtrip(tmp_path):
    rep = MetricsReport(
        iou=0.8125,
        threshold=0.5,
        counts=ConfusionCounts(tp=13, fp=1, fn=2, tn=240),
        per_item=[("a", 1.0), ("b", 0.625)],
    )
    path = tmp_path / "report.json"
    rep.save(path)
    back = MetricsReport.load(path)
    assert back.iou == rep.iou
    assert back.threshold == rep.threshold
    assert back.counts.as_dict() == rep.counts.as_dict()
    assert back.per_item == rep.per_item
