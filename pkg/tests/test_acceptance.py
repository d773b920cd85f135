"""Acceptance criteria 1-9, one test each.

Each test records a single PASS/FAIL line (printed at the end of the pytest
run) and then asserts. Criteria 5, 6 and 8 train real models and take tens
of minutes on one CPU core.
"""

import time
from fractions import Fraction

import numpy as np
import pytest

from revtransfer.augment import flip_lr
from revtransfer.dataset import DIAGNOSES, write_dataset
from revtransfer.experiments import (OverfitConfig, ReverseTransferConfig, augmentation_run,
                                     directional_check, mean_accuracy, overfit_run,
                                     reverse_transfer_run)
from revtransfer.gradcheck import run_gradchecks
from revtransfer.labels import DENSE, DENSE_TO_SPARSE, LabelMap, get_schema, remap_dense_to_sparse
from revtransfer.metrics import (cls_report, iou_scores, merge_dense_prediction_for_sparse_scoring,
                                 seg_confusion)
from revtransfer.phantom import DatasetSpec, gen_dataset
from revtransfer.rng import SplitMix64
from revtransfer.train import TrainConfig, train_classification, train_segmentation
from revtransfer.unet import (ClassifierConfig, UNetConfig, attach_cls_head, build_unet,
                              cls_forward, load_weights, save_weights)

_RUNS = {}   # first-run results reused by the determinism criterion


# -- 1 ---------------------------------------------------------------------------

def test_criterion_1_gradcheck(acceptance_report):
    layers = ["conv2d", "transposed_conv2d", "maxpool2d", "relu", "softmax_ce",
              "global_avg_pool", "fully_connected"]
    t0 = time.perf_counter()
    results = run_gradchecks(range(10), layers)
    secs = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results)
    ok = worst < 1e-4 and secs < 120
    acceptance_report(1, ok, f"max rel error {worst:.2e} over {len(layers)} layers x 10 seeds "
                             f"(< 1e-4), {secs:.1f}s (< 120s)")
    assert ok


# -- 2 ---------------------------------------------------------------------------

def _iou_oracle(pred, gt, c):
    """Per-class IoU by counting pixels one at a time; exact rationals."""
    inter, pred_n, gt_n = [0] * c, [0] * c, [0] * c
    correct = 0
    for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
        pred_n[p] += 1
        gt_n[g] += 1
        if p == g:
            inter[p] += 1
            correct += 1
    ious = [None if pred_n[k] + gt_n[k] - inter[k] == 0 else
            Fraction(inter[k], pred_n[k] + gt_n[k] - inter[k]) for k in range(c)]
    present = [float(v) for v in ious if v is not None]
    mean = sum(present) / len(present)
    return ious, mean, Fraction(correct, pred.size)


def _cls_oracle(preds, gts):
    out = {}
    names = [d.value for d in DIAGNOSES]
    for name in names:
        tp = sum(1 for p, g in zip(preds, gts) if p == name and g == name)
        fp = sum(1 for p, g in zip(preds, gts) if p == name and g != name)
        fn = sum(1 for p, g in zip(preds, gts) if p != name and g == name)
        prec = Fraction(tp, tp + fp) if tp + fp else Fraction(0)
        rec = Fraction(tp, tp + fn) if tp + fn else Fraction(0)
        pr, rc = float(prec), float(rec)
        f1 = 2 * pr * rc / (pr + rc) if pr + rc else 0.0
        out[name] = (float(prec), float(rec), f1)
    acc = Fraction(sum(p == g for p, g in zip(preds, gts)), len(gts))
    return out, float(acc)


def test_criterion_2_metric_oracles(acceptance_report):
    rng = SplitMix64(2024)
    seg_bad = cls_bad = 0
    for _ in range(100):
        c = DENSE.n_classes
        # skewed class draws so some classes are absent from both maps
        hi = rng.integers(2, c + 1)
        pred = rng.integers(0, hi, 256).reshape(16, 16)
        gt = rng.integers(0, hi, 256).reshape(16, 16)
        got = iou_scores(seg_confusion(LabelMap(DENSE, pred), LabelMap(DENSE, gt)))
        ious, mean, acc = _iou_oracle(pred, gt, c)
        per_class_ok = all((np.isnan(a) if e is None else a == float(e))
                           for a, e in zip(got.per_class, ious))
        if not (per_class_ok and got.mean_iou == mean and got.pixel_accuracy == float(acc)):
            seg_bad += 1
    names = [d.value for d in DIAGNOSES]
    for _ in range(100):
        n = rng.integers(1, 60)
        gts = [names[i] for i in rng.integers(0, 3, n)]
        preds = [names[i] for i in rng.integers(0, 3, n)]
        rep = cls_report(preds, gts).as_dict()
        per, acc = _cls_oracle(preds, gts)
        exp = {"accuracy": acc}
        for name, (p, r, f) in per.items():
            exp.update({f"{name} precision": p, f"{name} recall": r, f"{name} F1": f})
        if rep != exp:
            cls_bad += 1
    ok = seg_bad == 0 and cls_bad == 0
    acceptance_report(2, ok, f"exact mismatches: iou {seg_bad}/100 maps, cls {cls_bad}/100 lists")
    assert ok


# -- 3 ---------------------------------------------------------------------------

def test_criterion_3_dense_sparse_scoring(acceptance_report):
    rng = SplitMix64(3)
    bad = 0
    for _ in range(50):
        h, w = rng.integers(4, 33), rng.integers(4, 33)
        pred = LabelMap(DENSE, rng.integers(0, 7, h * w).reshape(h, w))
        gt = LabelMap(DENSE, rng.integers(0, 7, h * w).reshape(h, w))
        merged = seg_confusion(merge_dense_prediction_for_sparse_scoring(pred),
                               remap_dense_to_sparse(gt))
        remapped = seg_confusion(remap_dense_to_sparse(pred), remap_dense_to_sparse(gt))
        # third route: fold the dense confusion through the class map
        dense = seg_confusion(pred, gt).counts
        folded = np.zeros((4, 4), np.int64)
        for i in range(7):
            for j in range(7):
                folded[DENSE_TO_SPARSE[i], DENSE_TO_SPARSE[j]] += dense[i, j]
        if not (merged == remapped and np.array_equal(merged.counts, folded)):
            bad += 1
    acceptance_report(3, bad == 0, f"{50 - bad}/50 dense maps give identical sparse confusions")
    assert bad == 0


# -- 4 ---------------------------------------------------------------------------

def _check_augmentation(originals, augmented):
    by_id = {s.sample_id: s for s in originals}
    failures = 0
    for a in augmented:
        src = by_id[a.sample_id.rsplit("_", 1)[0]]
        flipped = a.augment.startswith("flip")
        ref_labels = src.labels.pixels[:, ::-1] if flipped else src.labels.pixels
        inv = flip_lr(flip_lr(a))
        if not (np.array_equal(a.labels.pixels, ref_labels) and inv.same_as(a)
                and a.grey.shape == src.grey.shape):
            failures += 1
    return failures


def test_criterion_4_augmentation(acceptance_report, tmp_path):
    originals, augmented = augmentation_run(seed=0)
    failures = _check_augmentation(originals, augmented)
    ids_unique = len({s.sample_id for s in augmented}) == len(augmented)
    manifest = write_dataset(augmented, tmp_path / "run1")
    _RUNS[4] = open(manifest, "rb").read()
    ok = len(originals) == 152 and len(augmented) == 912 and failures == 0 and ids_unique
    acceptance_report(4, ok, f"{len(originals)} -> {len(augmented)} samples (want 152 -> 912); "
                             f"flip involution + label invariance failures {failures}")
    assert ok


# -- 5 ---------------------------------------------------------------------------

def test_criterion_5_overfit(acceptance_report):
    res = overfit_run(OverfitConfig())
    _RUNS[5] = res
    ok = res["pixel_accuracy"] >= 0.95 and res["seconds"] < 600
    acceptance_report(5, ok, f"train pixel accuracy {res['pixel_accuracy']:.4f} (>= 0.95), "
                             f"{res['seconds']:.0f}s (< 600s)")
    assert ok


# -- 6 ---------------------------------------------------------------------------

def _reverse_transfer(out_dir):
    res = reverse_transfer_run(ReverseTransferConfig(), str(out_dir), log=lambda m: None)
    accs = [mean_accuracy(res, t) for t in ("cls_dense_pretrain", "cls_sparse_pretrain",
                                            "cls_scratch")]
    return res, accs


def test_criterion_6_reverse_transfer(acceptance_report, tmp_path):
    res, (dense, sparse, scratch) = _reverse_transfer(tmp_path)
    _RUNS[6] = res
    ok = directional_check(dense, sparse, scratch) and res["seconds"] < 3600
    branch = "ordering" if dense >= sparse >= scratch - 0.02 else "dense-vs-scratch margin"
    acceptance_report(6, ok, f"accuracy dense {dense:.3f} / sparse {sparse:.3f} / scratch "
                             f"{scratch:.3f} on {res['n_diagnostic']} images "
                             f"({branch if ok else 'neither condition'}), {res['seconds']:.0f}s (< 3600s)")
    assert ok


# -- 7 ---------------------------------------------------------------------------

def test_criterion_7_head_contract(acceptance_report):
    rng = SplitMix64(7)
    worst = 0.0
    for i in range(1000):
        classes = 7 if i % 2 == 0 else 4
        cfg = UNetConfig(depth=2, base_channels=rng.integers(1, 4), n_seg_classes=classes)
        w = attach_cls_head(build_unet(cfg, rng.next_u64()), ClassifierConfig(classes), i)
        scale = 10.0 ** rng.uniform((), -2, 2)
        for k in w.params:
            w.params[k] = (w.params[k] * scale).astype(np.float32)
        n = rng.integers(1, 4)
        x = rng.uniform((n, 1, 4, 4), -1, 2).astype(np.float32)
        probs = cls_forward(w, x).value.astype(np.float64)
        worst = max(worst, float(np.abs(probs.sum(axis=1) - 1).max()))

    samples, _ = gen_dataset(DatasetSpec(frames=(2, 2), height=16, width=16), seed=7)
    widths = {}
    for schema, classes in (("dense", 7), ("sparse", 4)):
        pre, _ = train_segmentation(samples, get_schema(schema), TrainConfig(epochs=1), 0,
                                    unet_cfg=UNetConfig(depth=2, base_channels=2, n_seg_classes=classes))
        wc, _ = train_classification(samples, TrainConfig(epochs=1), pretrained=pre, seed=0)
        widths[schema] = wc.params["head.fc.weight"].shape[1]
    ok = worst <= 1e-6 and widths == {"dense": 7, "sparse": 4}
    acceptance_report(7, ok, f"max |row sum - 1| {worst:.1e} over 1000 draws (<= 1e-6); "
                             f"head widths dense {widths['dense']}, sparse {widths['sparse']}")
    assert ok


# -- 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism(acceptance_report, tmp_path):
    missing = [n for n in (4, 5, 6) if n not in _RUNS]
    if missing:
        acceptance_report(8, False, f"first runs of criteria {missing} unavailable")
        pytest.fail("criteria 4-6 must run first")
    _, augmented = augmentation_run(seed=0)
    same4 = open(write_dataset(augmented, tmp_path / "run2"), "rb").read() == _RUNS[4]
    res5 = overfit_run(OverfitConfig())
    same5 = all(res5[k] == _RUNS[5][k] for k in ("pixel_accuracy", "mean_iou", "best_epoch",
                                                 "final_loss"))
    res6, _ = _reverse_transfer(tmp_path / "rt")
    first = _RUNS[6]
    same6 = res6["report"] == first["report"] and all(
        res6["summaries"][t]["per_fold"] == first["summaries"][t]["per_fold"]
        for t in first["summaries"])
    ok = same4 and same5 and same6
    acceptance_report(8, ok, f"repeat identical: manifest {same4}, overfit metrics {same5}, "
                             f"reverse-transfer reports {same6}")
    assert ok


# -- 9 ---------------------------------------------------------------------------

def test_criterion_9_checkpoint_round_trip(acceptance_report, tmp_path):
    rng = SplitMix64(9)
    identical = 0
    for i in range(10):
        cfg = UNetConfig(depth=rng.integers(2, 4), base_channels=rng.integers(1, 6),
                         n_seg_classes=(7, 4)[i % 2])
        w = build_unet(cfg, rng.next_u64())
        if i % 3 == 0:
            w = attach_cls_head(w, ClassifierConfig(cfg.n_seg_classes), i)
        for k in w.params:   # non-trivial values everywhere, biases included
            w.params[k] = rng.uniform(w.params[k].shape, -5, 5).astype(np.float32)
        a, b = tmp_path / f"{i}a.rtw", tmp_path / f"{i}b.rtw"
        save_weights(w, a)
        save_weights(load_weights(a), b)
        identical += a.read_bytes() == b.read_bytes()
    acceptance_report(9, identical == 10, f"{identical}/10 random models byte-identical after "
                                          "save -> load -> save")
    assert identical == 10
