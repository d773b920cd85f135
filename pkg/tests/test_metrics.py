import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revtransfer import labels as L
from revtransfer.dataset import Diagnosis
from revtransfer.labels import DENSE, SPARSE, LabelMap
from revtransfer.metrics import (cls_report, cls_table, fold_aggregate, iou_scores,
                                 merge_dense_prediction_for_sparse_scoring, seg_confusion,
                                 seg_metric_dict, seg_table)
from revtransfer.rng import SplitMix64

C19, N, P = Diagnosis.COVID19, Diagnosis.NORMAL, Diagnosis.PNEUMONIA


def brute_iou(pred, gt, n_classes):
    """Per-class IoU from pixel coordinate sets; None for an empty union."""
    out = []
    coords = [(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1])]
    for k in range(n_classes):
        a = {xy for xy in coords if pred[xy] == k}
        b = {xy for xy in coords if gt[xy] == k}
        union = a | b
        out.append(len(a & b) / len(union) if union else None)
    return out


def brute_cls(preds, gts):
    out = {}
    for d in Diagnosis:
        tp = sum(p is d and g is d for p, g in zip(preds, gts))
        fp = sum(p is d and g is not d for p, g in zip(preds, gts))
        fn = sum(p is not d and g is d for p, g in zip(preds, gts))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        out[d] = (prec, rec, f1)
    return out, sum(p is g for p, g in zip(preds, gts)) / len(gts)


def test_confusion_diagonal_for_perfect_prediction():
    m = LabelMap(SPARSE, np.array([[0, 1], [2, 3]]))
    conf = seg_confusion(m, m).counts
    assert np.array_equal(conf, np.diag(np.diag(conf)))


def test_confusion_hand_count():
    gt = LabelMap(DENSE, np.array([[0], [1]]))     # 1-based classes 1, 2
    pred = LabelMap(DENSE, np.array([[1], [1]]))
    conf = seg_confusion(pred, gt).counts
    assert conf[0, 1] == 1 and conf[1, 1] == 1 and conf.sum() == 2


def test_confusion_additive():
    rng = SplitMix64(4)
    maps = [LabelMap(SPARSE, rng.integers(0, 4, 12).reshape(3, 4)) for _ in range(4)]
    a = seg_confusion(maps[0], maps[1]) + seg_confusion(maps[2], maps[3])
    cat = seg_confusion(LabelMap(SPARSE, np.vstack([maps[0].pixels, maps[2].pixels])),
                        LabelMap(SPARSE, np.vstack([maps[1].pixels, maps[3].pixels])))
    assert a == cat


def test_confusion_mismatch_errors():
    with pytest.raises(ValueError):
        seg_confusion(LabelMap(SPARSE, np.zeros((2, 2))), LabelMap(SPARSE, np.zeros((2, 3))))
    with pytest.raises(L.SchemaError):
        seg_confusion(LabelMap(SPARSE, np.zeros((2, 2))), LabelMap(DENSE, np.zeros((2, 2))))


def test_iou_perfect():
    m = LabelMap(DENSE, np.array([[0, 6], [6, 3]]))
    s = iou_scores(seg_confusion(m, m))
    assert s.pixel_accuracy == 1.0 and s.mean_iou == 1.0
    assert np.isnan(s.per_class[1])


def test_iou_half_half():
    gt = LabelMap(SPARSE, np.array([[0, 0, 1, 1]]))
    pred = LabelMap(SPARSE, np.zeros((1, 4)))
    s = iou_scores(seg_confusion(pred, gt))
    assert s.per_class[0] == 0.5 and s.per_class[1] == 0
    assert s.mean_iou == 0.25 and s.pixel_accuracy == 0.5


def test_iou_empty_confusion():
    from revtransfer.metrics import SegConfusion
    with pytest.raises(ValueError):
        iou_scores(SegConfusion.empty(SPARSE))


@pytest.mark.parametrize("seed", range(25))
def test_iou_matches_brute_force(seed):
    rng = SplitMix64(seed)
    gt = rng.integers(0, 7, 256).reshape(16, 16)
    pred = np.where(rng.uniform((16, 16)) < 0.5, gt, rng.integers(0, 7, 256).reshape(16, 16))
    s = iou_scores(seg_confusion(LabelMap(DENSE, pred), LabelMap(DENSE, gt)))
    ref = brute_iou(pred, gt, 7)
    for got, want in zip(s.per_class, ref):
        assert (np.isnan(got) and want is None) or got == want
    present = [v for v in ref if v is not None]
    assert s.mean_iou == pytest.approx(sum(present) / len(present), rel=1e-15)
    assert s.pixel_accuracy == (pred == gt).sum() / 256


def test_merge_rule():
    pred = LabelMap(DENSE, np.full((2, 2), L.HEALTHY_PL))
    assert np.all(merge_dense_prediction_for_sparse_scoring(pred).pixels == L.S_PLEURAL)
    ab = LabelMap(DENSE, np.array([[L.A_LINE, L.B_LINE]]))
    assert merge_dense_prediction_for_sparse_scoring(ab).pixels.tolist() == [[L.S_A_LINE, L.S_B_LINE]]
    with pytest.raises(L.SchemaError):
        merge_dense_prediction_for_sparse_scoring(LabelMap(SPARSE, np.zeros((1, 1))))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32))
def test_merged_scoring_equals_remapped_scoring(seed):
    rng = SplitMix64(seed)
    pred = LabelMap(DENSE, rng.integers(0, 7, 100).reshape(10, 10))
    gt = LabelMap(DENSE, rng.integers(0, 7, 100).reshape(10, 10))
    merged = seg_confusion(merge_dense_prediction_for_sparse_scoring(pred),
                           L.remap_dense_to_sparse(gt))
    remapped = seg_confusion(L.remap_dense_to_sparse(pred), L.remap_dense_to_sparse(gt))
    assert merged == remapped


def test_cls_report_all_correct():
    r = cls_report([N, P, C19], [N, P, C19])
    assert r.accuracy == 1 and np.all(r.precision == 1) and np.all(r.recall == 1)


def test_cls_report_hand_example():
    r = cls_report([C19, N, N], [C19, C19, N])
    c, n = C19.index, N.index
    assert (r.precision[c], r.recall[c]) == (1.0, 0.5)
    assert r.f1[c] == pytest.approx(2 / 3)
    assert (r.precision[n], r.recall[n]) == (0.5, 1.0)
    assert r.f1[n] == pytest.approx(2 / 3)
    assert r.accuracy == pytest.approx(2 / 3)
    assert r.precision[P.index] == 0 and r.f1[P.index] == 0


def test_cls_report_errors():
    with pytest.raises(ValueError):
        cls_report([N], [N, N])
    with pytest.raises(ValueError):
        cls_report([], [])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(list(Diagnosis)), st.sampled_from(list(Diagnosis))),
                min_size=1, max_size=40))
def test_cls_report_matches_brute_force(pairs):
    preds, gts = [p for p, _ in pairs], [g for _, g in pairs]
    r = cls_report(preds, gts)
    ref, acc = brute_cls(preds, gts)
    assert r.accuracy == acc
    for d, (prec, rec, f1) in ref.items():
        assert r.precision[d.index] == prec and r.recall[d.index] == rec
        assert r.f1[d.index] == pytest.approx(f1, rel=1e-15, abs=0)


def test_fold_aggregate():
    agg = fold_aggregate([{"a": 0.6}, {"a": 0.8}])
    assert agg.mean["a"] == pytest.approx(0.7) and agg.std["a"] == pytest.approx(0.1)
    same = fold_aggregate([{"a": 0.3}] * 3)
    assert same.std["a"] == 0
    vals = [{"a": v} for v in (0.1, 0.5, 0.9, 0.2)]
    assert fold_aggregate(vals).mean == fold_aggregate(vals[::-1]).mean
    with pytest.raises(ValueError):
        fold_aggregate([{"a": 1.0}])


def test_metric_values_in_unit_interval():
    rng = SplitMix64(2)
    gt = LabelMap(DENSE, rng.integers(0, 7, 64).reshape(8, 8))
    pred = LabelMap(DENSE, rng.integers(0, 7, 64).reshape(8, 8))
    d = seg_metric_dict(seg_confusion(pred, gt))
    assert all(0 <= v <= 1 for v in d.values() if not math.isnan(v))


def test_tables_render():
    sparse = fold_aggregate([{"pixel accuracy": 0.9, "mean IoU": 0.6, "background": 0.9,
                              "A-line": 0.4, "B-line": 0.5, "pleural line": 0.7}] * 2)
    text = seg_table({"Sparse": sparse}, {})
    assert "Pleural line" in text and "0.900 ± 0.000" in text
    agg = fold_aggregate([cls_report([N, C19], [N, P]).as_dict()] * 2)
    text = cls_table({"Dense": agg})
    assert "COVID-19 F1-score" in text and "0.500 ± 0.000" in text
