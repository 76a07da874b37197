import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from segbench import labels as cs
from segbench.evaluation import CategoryMap, ConfusionMatrix, cityscapes_categories, iou_metrics


def set_oracle(pred, label, k, ignore=None):
    """IoU per class from explicit pixel-index sets."""
    pred, label = pred.ravel(), label.ravel()
    keep = [i for i in range(label.size) if label[i] != ignore]
    out = []
    for c in range(k):
        t = {i for i in keep if label[i] == c}
        p = {i for i in keep if pred[i] == c}
        u = t | p
        out.append(len(t & p) / len(u) if u else float("nan"))
    return np.array(out)


def test_worked_example():
    rep = iou_metrics(ConfusionMatrix(2, [[3, 1], [2, 4]]))
    np.testing.assert_allclose(rep.class_iou, [0.5, 0.5714], atol=1e-4)
    assert rep.miou == pytest.approx(0.5357, abs=1e-4)
    # the same ten pixels through update()
    label = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 1])
    pred = np.array([0, 0, 0, 1, 0, 0, 1, 1, 1, 1])
    cm = ConfusionMatrix(2).update(pred, label)
    assert cm == ConfusionMatrix(2, [[3, 1], [2, 4]])
    np.testing.assert_allclose(set_oracle(pred, label, 2), rep.class_iou)


def test_oracle_random_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        k = int(rng.integers(2, 6))
        shape = tuple(rng.integers(1, 7, 2))
        label = rng.integers(0, k + 1, shape)  # k plays the ignore id
        pred = rng.integers(0, k, shape)
        if (label == k).all():
            label[0, 0] = 0
        cm = ConfusionMatrix(k).update(pred, label, ignore_index=k)
        rep = iou_metrics(cm)
        ref = set_oracle(pred, label, k, ignore=k)
        np.testing.assert_allclose(rep.class_iou, ref, atol=1e-6, equal_nan=True)
        assert rep.miou == pytest.approx(np.nanmean(ref), abs=1e-6)


def test_perfect_prediction():
    cm = ConfusionMatrix(3, np.diag([5, 2, 7]))
    rep = iou_metrics(cm)
    assert rep.miou == 1.0 and (rep.class_iou == 1).all()


def test_absent_class_excluded():
    rep = iou_metrics(ConfusionMatrix(3, [[4, 0, 0], [0, 2, 0], [0, 0, 0]]))
    assert np.isnan(rep.class_iou[2]) and rep.miou == 1.0


def test_update_rules():
    cm = ConfusionMatrix(3)
    x = np.array([[0, 1], [2, 2]])
    cm.update(x, x)
    assert (cm.counts == np.diag([1, 1, 2])).all()
    before = cm.copy()
    cm.update(x, np.full_like(x, 9), ignore_index=9)
    assert cm == before
    with pytest.raises(ValueError):
        cm.update(np.array([0, 3]), np.array([0, 1]))
    with pytest.raises(ValueError):
        cm.update(np.array([0, 1]), np.array([0, 1, 2]))
    with pytest.raises(ValueError):
        iou_metrics(ConfusionMatrix(2))


def test_halves_merge():
    rng = np.random.default_rng(5)
    for _ in range(20):
        label = rng.integers(0, 4, (8, 8))
        label[rng.random((8, 8)) < 0.2] = 255
        pred = rng.integers(0, 3, (8, 8))
        whole = ConfusionMatrix(3).update(pred, np.where(label == 3, 255, label), 255)
        a = ConfusionMatrix(3).update(pred[:4], np.where(label[:4] == 3, 255, label[:4]), 255)
        b = ConfusionMatrix(3).update(pred[4:], np.where(label[4:] == 3, 255, label[4:]), 255)
        assert a + b == whole == b.merge(a)
        # brute-force recount
        ref = np.zeros((3, 3), int)
        for g, p in zip(label.ravel(), pred.ravel()):
            if g < 3:
                ref[g, p] += 1
        assert (whole.counts == ref).all()


cms = st.integers(2, 6).flatmap(
    lambda k: arrays(np.int64, (k, k), elements=st.integers(0, 50)))


@settings(max_examples=100, deadline=None)
@given(cms, st.randoms())
def test_permutation_equivariant(counts, rnd):
    if counts.sum() == 0:
        return
    k = counts.shape[0]
    perm = list(range(k))
    rnd.shuffle(perm)
    a = iou_metrics(ConfusionMatrix(k, counts))
    b = iou_metrics(ConfusionMatrix(k, counts[np.ix_(perm, perm)]))
    assert a.miou == pytest.approx(b.miou, abs=1e-12)
    np.testing.assert_allclose(a.class_iou[perm], b.class_iou, equal_nan=True)


@settings(max_examples=100, deadline=None)
@given(cms)
def test_iou_bounds_and_diagonal(counts):
    if counts.sum() == 0:
        return
    rep = iou_metrics(ConfusionMatrix(len(counts), counts))
    v = rep.class_iou[~np.isnan(rep.class_iou)]
    assert ((0 <= v) & (v <= 1)).all()
    off = counts - np.diag(np.diag(counts))
    assert (rep.miou == 1.0) == (not off.any())


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_collapse_matches_relabel(seed):
    rng = np.random.default_rng(seed)
    k, c = int(rng.integers(2, 7)), int(rng.integers(1, 4))
    mapping = tuple(int(v) for v in rng.integers(0, c, k))
    cats = CategoryMap(mapping, tuple(f"c{i}" for i in range(c)))
    label, pred = rng.integers(0, k, 40), rng.integers(0, k, 40)
    cm = ConfusionMatrix(k).update(pred, label)
    lut = np.array(mapping)
    direct = ConfusionMatrix(c).update(lut[pred], lut[label])
    assert cats.collapse(cm) == direct
    rep = iou_metrics(cm, cats)
    np.testing.assert_allclose(rep.category_iou, iou_metrics(direct).class_iou, equal_nan=True)


def test_cityscapes_categories():
    cats = cityscapes_categories()
    assert len(cats.class_to_category) == 19 and len(cats.names) == 7
    assert set(cats.class_to_category) == set(range(7))


def test_csv_layout():
    cm = ConfusionMatrix(19, np.diag(np.arange(1, 20)))
    rep = iou_metrics(cm, cityscapes_categories())
    rows = list(csv.reader(io.StringIO(rep.to_csv("skipnet-mobilenet"))))
    assert len(rows) == 2
    head = rows[0]
    assert head[:2] == ["model", "mIoU"]
    assert head[2:11] == list(cs.TABLE1_CLASSES)
    assert set(head[2:21]) == set(cs.train_class_names())
    assert head[21] == "category_mIoU" and head[-2:] == ["class_iIoU", "category_iIoU"]
    assert rows[1][1] == "100.00" and rows[1][-1] == ""
