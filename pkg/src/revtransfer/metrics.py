"""Segmentation and classification scores, fold aggregation and table rendering.

Segmentation scores come from a confusion matrix accumulated over the whole
evaluated set (not averaged per image). Classes whose union is empty are left
out of the mean IoU. Precision/recall with a zero denominator count as 0.
Fold spread is the population standard deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DIAGNOSES, Diagnosis
from .labels import DENSE, DENSE_TO_SPARSE, SPARSE, LabelMap, LabelSchema, SchemaError


@dataclass(frozen=True, eq=False)
class SegConfusion:
    schema: LabelSchema
    counts: np.ndarray  # C×C int64, rows ground truth, columns prediction

    @classmethod
    def empty(cls, schema: LabelSchema) -> "SegConfusion":
        return cls(schema, np.zeros((schema.n_classes, schema.n_classes), dtype=np.int64))

    def __add__(self, other: "SegConfusion") -> "SegConfusion":
        if other.schema != self.schema:
            raise SchemaError("cannot add confusions of different schemas")
        return SegConfusion(self.schema, self.counts + other.counts)

    def __eq__(self, other):
        return (isinstance(other, SegConfusion) and self.schema == other.schema
                and np.array_equal(self.counts, other.counts))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def seg_confusion(pred: LabelMap, gt: LabelMap) -> SegConfusion:
    if pred.schema != gt.schema:
        raise SchemaError(f"prediction schema {pred.schema.name} != ground truth {gt.schema.name}")
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ in size")
    c = gt.schema.n_classes
    flat = gt.pixels.astype(np.int64).ravel() * c + pred.pixels.ravel()
    return SegConfusion(gt.schema, np.bincount(flat, minlength=c * c).reshape(c, c))


@dataclass(frozen=True)
class IoUScores:
    per_class: np.ndarray      # NaN where the class has an empty union
    mean_iou: float
    pixel_accuracy: float


def iou_scores(conf: SegConfusion) -> IoUScores:
    counts = conf.counts.astype(np.float64)
    total = counts.sum()
    if total == 0:
        raise ValueError("empty confusion matrix")
    diag = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - diag
    present = union > 0
    iou = np.full(len(diag), np.nan)
    iou[present] = diag[present] / union[present]
    return IoUScores(iou, float(iou[present].mean()), float(diag.sum() / total))


def merge_dense_prediction_for_sparse_scoring(pred: LabelMap) -> LabelMap:
    """Fold a dense prediction into sparse classes so it can be scored against sparse truth."""
    if pred.schema != DENSE:
        raise SchemaError(f"merge expects a dense prediction, got {pred.schema.name}")
    return LabelMap(SPARSE, DENSE_TO_SPARSE[pred.pixels])


@dataclass(frozen=True)
class ClsReport:
    precision: np.ndarray   # indexed by Diagnosis.index
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    class_names: tuple = tuple(d.value for d in DIAGNOSES)

    def as_dict(self) -> dict[str, float]:
        out = {"accuracy": self.accuracy}
        for i, name in enumerate(self.class_names):
            out[f"{name} precision"] = float(self.precision[i])
            out[f"{name} recall"] = float(self.recall[i])
            out[f"{name} F1"] = float(self.f1[i])
        return out


def _ratio(num, den):
    return np.where(den > 0, num / np.where(den > 0, den, 1), 0.0)


def cls_report(preds, gts) -> ClsReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth labels")
    if not gts:
        raise ValueError("no predictions to score")
    p = np.array([Diagnosis(d).index for d in preds])
    g = np.array([Diagnosis(d).index for d in gts])
    k = len(DIAGNOSES)
    conf = np.bincount(g * k + p, minlength=k * k).reshape(k, k).astype(np.float64)
    tp = np.diag(conf)
    precision = _ratio(tp, conf.sum(axis=0))
    recall = _ratio(tp, conf.sum(axis=1))
    f1 = _ratio(2 * precision * recall, precision + recall)
    return ClsReport(precision, recall, f1, float(tp.sum() / len(g)))


@dataclass(frozen=True)
class FoldAggregate:
    mean: dict
    std: dict
    k: int

    def cell(self, key: str) -> str:
        m, s = self.mean.get(key, np.nan), self.std.get(key, np.nan)
        return "n/a" if np.isnan(m) else f"{m:.3f} ± {s:.3f}"


def fold_aggregate(values: list[dict]) -> FoldAggregate:
    """Mean and population std per metric key over k >= 2 folds."""
    if len(values) < 2:
        raise ValueError(f"need at least 2 folds to aggregate, got {len(values)}")
    keys = list(values[0])
    for v in values[1:]:
        if list(v) != keys:
            raise ValueError("folds report different metric keys")
    k = len(values)
    mean, std = {}, {}
    for key in keys:
        xs = [float(v[key]) for v in values]
        # fsum is exactly rounded, so the result does not depend on fold order
        mean[key] = math.fsum(xs) / k
        std[key] = math.sqrt(math.fsum((x - mean[key]) ** 2 for x in xs) / k)
    return FoldAggregate(mean, std, k)


# -- report dictionaries and tables ----------------------------------------------

def seg_metric_dict(conf: SegConfusion) -> dict[str, float]:
    scores = iou_scores(conf)
    out = {"pixel accuracy": scores.pixel_accuracy, "mean IoU": scores.mean_iou}
    for name, v in zip(conf.schema.classes, scores.per_class):
        out[name] = float(v)
    return out


_SPARSE_COLUMNS = ("pixel accuracy", "mean IoU", "background", "A-line", "B-line", "pleural line")
_DENSE_COLUMNS = ("pixel accuracy", "mean IoU", "healthy pleural line", "unhealthy pleural line",
                  "healthy region", "unhealthy region")


def _table(header, rows):
    widths = [max(len(str(r[i])) for r in [header] + rows) for i in range(len(header))]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    fmt = lambda r: "| " + " | ".join(str(c).ljust(w) for c, w in zip(r, widths)) + " |"
    return "\n".join([line, fmt(header), line] + [fmt(r) for r in rows] + [line])


def seg_table(sparse_rows: dict[str, FoldAggregate], dense_rows: dict[str, FoldAggregate]) -> str:
    """Two-part segmentation table: sparse-class scores on top, dense-only classes below.

    ``sparse_rows`` maps a label-type name ("Sparse", "Dense") to the
    aggregate of sparse-scored metrics; ``dense_rows`` holds native dense
    scores of dense-trained models.
    """
    top = _table(["CNN", "Labels", "Pixel-wise Acc", "mean", "Background", "A-line", "B-line",
                  "Pleural line"],
                 [["U-Net", name] + [agg.cell(c) for c in _SPARSE_COLUMNS]
                  for name, agg in sparse_rows.items()])
    if not dense_rows:
        return top
    bottom = _table(["CNN", "Labels", "Dense Pixel-wise Acc", "Dense mean", "Healthy Pleural line",
                     "Unhealthy Pleural line", "Healthy Region", "Unhealthy Region"],
                    [["U-Net", name] + [agg.cell(c) for c in _DENSE_COLUMNS]
                     for name, agg in dense_rows.items()])
    return top + "\n" + bottom


def cls_table(rows: dict[str, FoldAggregate]) -> str:
    header = ["CNN", "Pretrain type", "accuracy"]
    for name in (d.value for d in DIAGNOSES):
        header += [f"{name} precision", f"{name} recall", f"{name} F1-score"]
    body = []
    for label, agg in rows.items():
        row = ["U-Net", label, agg.cell("accuracy")]
        for name in (d.value for d in DIAGNOSES):
            row += [agg.cell(f"{name} precision"), agg.cell(f"{name} recall"), agg.cell(f"{name} F1")]
        body.append(row)
    return _table(header, body)
