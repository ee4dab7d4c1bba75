import numpy as np
import pytest

from mpsams.metrics import aggregate, binarize, compute_metrics


def brute_force_counts(pred, gt):
    tp = fp = fn = tn = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        if p and g:
            tp += 1
        elif p:
            fp += 1
        elif g:
            fn += 1
        else:
            tn += 1
    return tp, fp, fn, tn


def test_binarize_threshold_is_inclusive():
    assert binarize(np.full((3, 3), 0.5), 0.5).all()


def test_binarize_zero_threshold_all_positive(rng):
    assert binarize(rng.random((4, 4)), 0.0).all()


def test_binarize_one_threshold(rng):
    assert not binarize(rng.random((4, 4)) * 0.999, 1.0).any()


def test_identical_masks():
    m = np.zeros((5, 5), bool)
    m[1:3, 1:4] = True
    r = compute_metrics(m, m)
    assert (r.ppv, r.sen, r.dsc) == (1.0, 1.0, 1.0)


def test_disjoint_masks():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[0, 0] = b[3, 3] = True
    r = compute_metrics(a, b)
    assert (r.ppv, r.sen, r.dsc) == (0.0, 0.0, 0.0)


def test_half_recall_case_against_counter():
    gt = np.zeros((3, 3), bool)
    gt.flat[[0, 1, 2, 3]] = True
    pred = np.zeros((3, 3), bool)
    pred.flat[[0, 1]] = True
    tp, fp, fn, tn = brute_force_counts(pred, gt)
    r = compute_metrics(pred, gt)
    assert (r.tp, r.fp, r.fn, r.tn) == (tp, fp, fn, tn) == (2, 0, 2, 5)
    assert r.ppv == 1.0
    assert r.sen == 0.5
    assert r.dsc == pytest.approx(2 / 3, abs=1e-12)


@pytest.mark.parametrize(
    "pred_on, gt_on, expected",
    [(False, False, (1.0, 1.0, 1.0)), (False, True, (0.0, 0.0, 0.0)), (True, False, (0.0, 0.0, 0.0))],
)
def test_empty_mask_conventions(pred_on, gt_on, expected):
    pred = np.zeros((3, 3), bool)
    gt = np.zeros((3, 3), bool)
    pred[1, 1] = pred_on
    gt[1, 1] = gt_on
    r = compute_metrics(pred, gt)
    assert (r.ppv, r.sen, r.dsc) == expected


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((2, 2)), np.zeros((3, 3)))


def test_random_pairs_properties(rng):
    for _ in range(200):
        pred = rng.random((6, 7)) < rng.random()
        gt = rng.random((6, 7)) < rng.random()
        r = compute_metrics(pred, gt)
        assert 0 <= r.dsc <= 1 and 0 <= r.ppv <= 1 and 0 <= r.sen <= 1
        assert r.tp + r.fp + r.fn + r.tn == pred.size
        assert compute_metrics(gt, pred).dsc == r.dsc
        if r.tp:
            assert r.dsc == pytest.approx(2 * r.ppv * r.sen / (r.ppv + r.sen), rel=1e-12)


def test_aggregate_per_image_vs_pooled():
    a = compute_metrics(np.array([1, 1, 0, 0], bool), np.array([1, 0, 0, 0], bool))
    b = compute_metrics(np.array([1, 0, 0, 0], bool), np.array([1, 1, 1, 1], bool))
    per = aggregate([a, b])
    pooled = aggregate([a, b], "pooled")
    assert per.dsc == pytest.approx((a.dsc + b.dsc) / 2)
    assert pooled.dsc == pytest.approx(2 * 2 / (2 * 2 + 1 + 3))
    assert (per.tp, per.fp, per.fn) == (pooled.tp, pooled.fp, pooled.fn) == (2, 1, 3)
