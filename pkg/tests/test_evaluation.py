import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scasnet.evaluation import (
    EvalReport, boundary_pixels, confusion_matrix, default_thresholds, erode_boundaries, pr_csv, pr_curve, score,
)


def brute_erosion(gt, radius):
    h, w = gt.shape
    b = np.zeros_like(gt, dtype=bool)
    for i in range(h):
        for j in range(w):
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ii, jj = i + di, j + dj
                if 0 <= ii < h and 0 <= jj < w and gt[ii, jj] != gt[i, j]:
                    b[i, j] = True
    pts = np.argwhere(b)
    mask = np.zeros_like(b)
    if len(pts) == 0:
        return mask
    for i in range(h):
        for j in range(w):
            d = np.sqrt(((pts - [i, j]) ** 2).sum(axis=1)).min()
            mask[i, j] = d <= radius
    return mask


def binary_case(tp, fp, fn, tn=0):
    gt = np.array([1] * tp + [0] * fp + [1] * fn + [0] * tn)
    pred = np.array([1] * tp + [1] * fp + [0] * fn + [0] * tn)
    return pred, gt


def test_hand_case_50_25_25():
    pred, gt = binary_case(50, 25, 25)
    r = score(pred, gt, num_classes=2)
    assert r.precision[1] == pytest.approx(2 / 3)
    assert r.recall[1] == pytest.approx(2 / 3)
    assert r.f1[1] == pytest.approx(2 / 3)
    assert r.iou[1] == pytest.approx(0.5)
    assert r.f1[1] == pytest.approx(2 * r.iou[1] / (1 + r.iou[1]))


def test_perfect_prediction(rng):
    gt = rng.integers(0, 4, (20, 20))
    r = score(gt, gt, num_classes=4)
    assert np.all(r.f1 == 1) and np.all(r.iou == 1) and r.overall_accuracy == 1


def test_disjoint_class_scores_zero():
    gt = np.array([0, 0, 1, 1])
    pred = np.array([1, 1, 0, 0])
    r = score(pred, gt, num_classes=2)
    assert np.all(r.iou == 0) and np.all(r.f1 == 0)


def test_absent_classes_excluded_from_means():
    gt = np.array([0, 0, 1, 1])
    r = score(gt, gt, num_classes=4)
    assert list(r.present) == [True, True, False, False]
    assert r.mean_iou == 1.0 and r.mean_f1 == 1.0


def test_class_in_gt_never_predicted_is_zero_not_nan():
    gt = np.array([0, 1])
    pred = np.array([0, 0])
    r = score(pred, gt, num_classes=2)
    assert r.precision[1] == 0 and r.recall[1] == 0 and r.f1[1] == 0
    assert r.mean_iou == pytest.approx((0.5 + 0) / 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_f1_iou_identity(seed, k):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, k, (12, 12))
    pred = np.where(rng.random((12, 12)) < 0.6, gt, rng.integers(0, k, (12, 12)))
    r = score(pred, gt, num_classes=k)
    for c in range(k):
        assert r.f1[c] == pytest.approx(2 * r.iou[c] / (1 + r.iou[c]), abs=1e-15)
        assert 0 <= r.iou[c] <= 1 and 0 <= r.f1[c] <= 1


def test_confusion_sums_to_unmasked(rng):
    gt = rng.integers(0, 3, (10, 10))
    pred = rng.integers(0, 3, (10, 10))
    mask = rng.random((10, 10)) < 0.3
    c = confusion_matrix(pred, gt, 3, mask)
    assert c.sum() == (~mask).sum()
    ref = np.zeros((3, 3), dtype=int)
    for g, p, m in zip(gt.ravel(), pred.ravel(), mask.ravel()):
        if not m:
            ref[g, p] += 1
    assert np.array_equal(c, ref)


def test_shuffle_invariance(rng):
    gt = rng.integers(0, 4, 300)
    pred = rng.integers(0, 4, 300)
    perm = rng.permutation(300)
    assert np.array_equal(score(pred, gt, num_classes=4).confusion, score(pred[perm], gt[perm], num_classes=4).confusion)


def test_masked_pixels_have_no_influence(rng):
    gt = rng.integers(0, 3, (16, 16))
    pred = rng.integers(0, 3, (16, 16))
    mask = erode_boundaries(gt, 1)
    other = np.where(mask, rng.integers(0, 3, (16, 16)), pred)
    assert score(pred, gt, mask, 3).to_json() == score(other, gt, mask, 3).to_json()


def test_shape_mismatch():
    with pytest.raises(ValueError):
        score(np.zeros((3, 3)), np.zeros((3, 4)))


def test_report_merge_is_confusion_addition(rng):
    a = score(rng.integers(0, 3, 50), rng.integers(0, 3, 50), num_classes=3)
    b = score(rng.integers(0, 3, 50), rng.integers(0, 3, 50), num_classes=3)
    assert np.array_equal((a + b).confusion, a.confusion + b.confusion)


def test_report_formats():
    r = score(np.array([0, 1, 1]), np.array([0, 1, 0]), num_classes=2, class_names=["bg", "fg"])
    d = r.to_dict()
    assert d["pixels"] == 3 and set(d["classes"]) == {"bg", "fg"}
    text = r.to_text()
    assert text.splitlines()[0].split() == ["class", "prec", "rec", "F1", "IoU"]
    assert "overall accuracy" in text


def test_erosion_uniform_map_empty():
    assert not erode_boundaries(np.zeros((9, 9), dtype=int), 3).any()


def test_erosion_vertical_edge_band():
    gt = np.zeros((10, 20), dtype=int)
    gt[:, 10:] = 1
    mask = erode_boundaries(gt, 3)
    cols = np.where(mask.all(axis=0))[0]
    # boundary pixels are columns 9 and 10; everything within 3 of them is ignored
    assert list(cols) == list(range(6, 14))
    assert not mask[:, :6].any() and not mask[:, 14:].any()


def test_erosion_radius_zero_is_boundary(rng):
    gt = rng.integers(0, 3, (12, 12))
    assert np.array_equal(erode_boundaries(gt, 0), boundary_pixels(gt))


@pytest.mark.parametrize("seed", range(10))
def test_erosion_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 3, (6, 6)).repeat(3, 0).repeat(3, 1)
    assert np.array_equal(erode_boundaries(gt, 3), brute_erosion(gt, 3))


def test_erosion_negative_radius():
    with pytest.raises(ValueError):
        erode_boundaries(np.zeros((3, 3)), -1)


def brute_pr(prob, gt, mask, k, thresholds):
    out = []
    keep = ~mask
    for t in thresholds:
        pos = (prob[k] >= t) & keep
        truth = (gt == k) & keep
        tp = int((pos & truth).sum())
        fp = int((pos & ~truth).sum())
        fn = int((~pos & truth).sum())
        out.append((t, tp / (tp + fp) if tp + fp else 0.0, tp / (tp + fn) if tp + fn else 0.0))
    return out


@pytest.mark.parametrize("seed", range(5))
def test_pr_curve_matches_recount(seed):
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((3, 15, 15))
    prob = np.exp(logits) / np.exp(logits).sum(axis=0)
    prob[0, :2] = 0.5  # exact ties with a threshold
    gt = rng.integers(0, 3, (15, 15))
    mask = rng.random((15, 15)) < 0.2
    th = default_thresholds()
    for k in range(3):
        got = pr_curve(prob, gt, mask, k, th)
        ref = brute_pr(prob, gt, mask, k, th)
        for (t1, p1, r1), (t2, p2, r2) in zip(got, ref):
            assert t1 == t2 and p1 == pytest.approx(p2, abs=1e-15) and r1 == pytest.approx(r2, abs=1e-15)


def test_pr_curve_endpoints_and_monotone(rng):
    prob = rng.random((2, 10, 10))
    gt = rng.integers(0, 2, (10, 10))
    curve = pr_curve(prob, gt, None, 1)
    assert curve[0][2] == 1.0
    recalls = [r for _, _, r in curve]
    assert all(a >= b for a, b in zip(recalls, recalls[1:]))
    assert len(curve) == 101


def test_pr_thresholds_must_ascend(rng):
    with pytest.raises(ValueError):
        pr_curve(rng.random((2, 3, 3)), np.zeros((3, 3), dtype=int), None, 0, [0.5, 0.1])


def test_pr_csv():
    text = pr_csv({1: [(0.0, 0.5, 1.0)]}, ["a", "b"])
    assert text == "class,threshold,precision,recall\nb,0.0000,0.50000000,1.00000000\n"
