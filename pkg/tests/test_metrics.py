import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mtkd.metrics import (MEAN_KEYS, ROW_KEYS, ConfusionCounts, confusion, dataset_metrics, image_metrics,
                          partition_report)
from oracles import confusion_loop, metrics_loop

masks = arrays(np.uint8, (8, 8), elements=st.integers(0, 1))
sparse = st.sampled_from([0, 1, 2, 63, 64]).flatmap(
    lambda k: st.permutations(range(64)).map(
        lambda perm: np.isin(np.arange(64), perm[:k]).astype(np.uint8).reshape(8, 8)))


def test_confusion_examples():
    c = confusion(np.zeros((3, 3)), np.zeros((3, 3)))
    assert (c.tp, c.fp, c.tn, c.fn) == (0, 0, 9, 0)
    c = confusion([[1, 0], [0, 0]], [[1, 1], [0, 0]])
    assert (c.tp, c.fp, c.tn, c.fn) == (1, 1, 2, 0)
    with pytest.raises(ValueError):
        confusion(np.zeros((2, 2)), np.zeros((2, 3)))


@given(masks, masks)
def test_confusion_swap_symmetry(gt, pred):
    a, b = confusion(gt, pred), confusion(pred, gt)
    assert (a.tp, a.tn, a.fp, a.fn) == (b.tp, b.tn, b.fn, b.fp)
    assert a.total == 64


def test_image_metrics_worked_example():
    m = image_metrics(ConfusionCounts(tp=1, fp=1, tn=2, fn=0))
    assert m["IoU_1"] == 0.5
    assert m["IoU_0"] == pytest.approx(2 / 3, abs=1e-15)
    assert m["mIoU"] == pytest.approx(0.5833, abs=5e-5)
    assert m["mPrec"] == 0.75
    assert m["mRec"] == pytest.approx(0.8333, abs=5e-5)
    assert m["mFscore"] == pytest.approx(0.7333, abs=5e-5)


def test_perfect_and_empty_predictions():
    gt = np.zeros((4, 4), np.uint8)
    gt[1:3, 1:3] = 1
    assert all(v == 1 for v in image_metrics(confusion(gt, gt)).values())
    z = image_metrics(confusion(np.zeros((4, 4)), np.zeros((4, 4))))
    assert all(v == 1 for v in z.values())


def test_zero_precision_and_recall_gives_zero_fscore():
    # nothing changed, everything predicted changed
    m = image_metrics(confusion(np.zeros((2, 2)), np.ones((2, 2))))
    assert m["Prec_1"] == 0 and m["Rec_1"] == 1.0  # recall is 0/0
    m = image_metrics(ConfusionCounts(tp=0, fp=2, tn=0, fn=2))
    assert m["Prec_1"] == 0 and m["Rec_1"] == 0 and m["Fscore_1"] == 0


def test_skip_class_mode():
    m = image_metrics(confusion(np.zeros((2, 2)), np.zeros((2, 2))), "skip-class")
    assert m["IoU_1"] == 0 and m["mIoU"] == 1.0  # absent class left out of the mean
    m = image_metrics(ConfusionCounts(1, 1, 2, 0), "skip-class")
    assert m == image_metrics(ConfusionCounts(1, 1, 2, 0), "one")
    with pytest.raises(ValueError):
        image_metrics(ConfusionCounts(1, 1, 2, 0), "zero")


@given(st.one_of(masks, sparse), st.one_of(masks, sparse))
def test_metrics_match_pixel_loop_oracle(gt, pred):
    c = confusion(gt, pred)
    assert (c.tp, c.fp, c.tn, c.fn) == confusion_loop(gt, pred)
    got = image_metrics(c)
    want = metrics_loop(gt, pred)
    for k in want:
        assert abs(got[k] - want[k]) <= 1e-12, k


@given(masks, masks)
def test_complement_swaps_classes(gt, pred):
    a = image_metrics(confusion(gt, pred))
    b = image_metrics(confusion(1 - gt, 1 - pred))
    for m in ("IoU", "Prec", "Rec", "Fscore"):
        assert a[f"{m}_0"] == b[f"{m}_1"] and a[f"{m}_1"] == b[f"{m}_0"]
    for k in MEAN_KEYS:
        assert a[k] == b[k]


@given(masks, masks)
def test_precision_recall_duality_and_range(gt, pred):
    a = image_metrics(confusion(gt, pred))
    b = image_metrics(confusion(pred, gt))
    assert a["Prec_1"] == b["Rec_1"]
    assert all(0 <= v <= 1 for v in a.values())


def test_dataset_metrics_examples():
    gt = np.zeros((4, 4), np.uint8)
    gt[0, :2] = 1
    one = dataset_metrics([(gt, gt, "a")])
    assert one.aggregate["mIoU"] == 1.0 and one.rows[0]["car"] == 0.125
    half_gt = np.array([[1, 0], [0, 0]])
    half_pred = np.array([[1, 1], [0, 0]])
    img = image_metrics(confusion(half_gt, half_pred))
    rep = dataset_metrics([(gt, gt, "a"), (half_gt, half_pred, "b")])
    assert rep.aggregate["mIoU"] == pytest.approx((1 + img["mIoU"]) / 2, abs=1e-15)
    with pytest.raises(ValueError):
        dataset_metrics([])


def test_per_image_mean_ignores_image_size():
    # big perfect image and small image with mIoU 0.5
    big = np.zeros((16, 16), np.uint8)
    small_gt = np.array([[1, 0]])
    small_pred = np.array([[0, 1]])
    m_small = image_metrics(confusion(small_gt, small_pred))["mIoU"]
    assert m_small == 0.0
    gt2 = np.array([[1, 1], [0, 0]])
    pred2 = np.array([[1, 0], [0, 0]])
    m2 = image_metrics(confusion(gt2, pred2))["mIoU"]
    rep = dataset_metrics([(big, big, "a"), (gt2, pred2, "b")])
    assert rep.aggregate["mIoU"] == pytest.approx((1 + m2) / 2)


@given(st.lists(st.tuples(masks, masks), min_size=1, max_size=8), st.randoms())
def test_dataset_metrics_order_and_duplicate_invariant(pairs, rnd):
    rows = [(g, p, str(i)) for i, (g, p) in enumerate(pairs)]
    base = dataset_metrics(rows).aggregate
    shuffled = rows[:]
    rnd.shuffle(shuffled)
    assert dataset_metrics(shuffled).aggregate == base
    doubled = dataset_metrics(rows + [(g, p, i + "x") for g, p, i in rows]).aggregate
    for k in ROW_KEYS:
        assert doubled[k] == pytest.approx(base[k], abs=1e-15)


def test_report_summary_layout():
    gt = np.array([[1, 0], [0, 0]])
    rep = dataset_metrics([(gt, gt, "a")])
    s = rep.summary()
    assert set(s["per_class"]) == {"unchanged", "changed"}
    assert set(s["per_class"]["changed"]) == {"IoU", "Rec", "Prec", "Fscore"}
    assert s["num_images"] == 1 and set(s["mean"]) == set(MEAN_KEYS)


def _rows(cars, mious):
    return [{"id": f"r{i}", "car": c, "mIoU": m} for i, (c, m) in enumerate(zip(cars, mious))]


def test_partition_report_examples():
    rows = _rows([0.3, 0.1, 0.5, 0.2, 0.0, 0.4, 0.6, 0.7, 0.8, 0.9], [i / 10 for i in range(10)])
    table = partition_report(rows, 5)
    assert [t["count"] for t in table] == [2] * 5
    # sorted by CAR: (0.0:.4, 0.1:.1), (0.2:.3, 0.3:.0), (0.4:.5, 0.5:.2), (0.6:.6, 0.7:.7), (0.8:.8, 0.9:.9)
    assert [t["mIoU"] for t in table] == pytest.approx([0.25, 0.15, 0.35, 0.65, 0.85])
    assert (table[0]["car_min"], table[0]["car_max"]) == (0.0, 0.1)
    single = partition_report(rows, 1)
    assert single[0]["mIoU"] == pytest.approx(np.mean([r["mIoU"] for r in rows]))
    with pytest.raises(ValueError):
        partition_report(rows[:3], 5)


def test_partition_report_remainder_goes_first_and_ties_sort_by_id():
    rows = _rows([0.1] * 7, [0, 1, 0, 1, 0, 1, 0])
    table = partition_report(rows, 3)
    assert [t["count"] for t in table] == [3, 2, 2]
    # ids r0..r6 in order; groups r0-r2, r3-r4, r5-r6
    assert [t["mIoU"] for t in table] == pytest.approx([1 / 3, 0.5, 0.5])
