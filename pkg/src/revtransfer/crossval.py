"""k-fold splits and cross-validated experiments for every task.

Two split modes:

``by_group_id``
    whole groups (synthetic patients / videos) go to one fold. Groups are
    shuffled within each diagnosis and dealt round-robin, so diagnoses are
    spread evenly and fold sizes differ when groups differ in length.
``by_augmented_image``
    every (augmented) image is shuffled independently and cut into k equal
    chunks. Augmented copies of one source image can land in different
    folds; this random split leaks augmented copies and is opt-in.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataset import Diagnosis, load_dataset
from .labels import DENSE, SPARSE, LabelMap, remap_dense_to_sparse
from .metrics import (FoldAggregate, SegConfusion, cls_report, cls_table, fold_aggregate,
                      merge_dense_prediction_for_sparse_scoring, seg_confusion, seg_metric_dict,
                      seg_table)
from .rng import SplitMix64, derive_seed
from .train import (CLS_DEFAULTS, SEG_DEFAULTS, TrainConfig, evaluate_segmentation,
                    predict_diagnoses, train_classification, train_segmentation)
from .unet import UNetConfig, load_weights, predict_labels, save_weights

log = logging.getLogger(__name__)

GROUPINGS = ("by_group_id", "by_augmented_image")
TASKS = ("seg_dense", "seg_sparse", "cls_dense_pretrain", "cls_sparse_pretrain", "cls_scratch")
ROW_LABEL = {"seg_dense": "Dense", "seg_sparse": "Sparse", "cls_dense_pretrain": "Dense",
             "cls_sparse_pretrain": "Sparse", "cls_scratch": "Non-pretrained"}


class ConfigError(ValueError):
    """Invalid experiment configuration (maps to CLI exit code 1)."""


@dataclass
class FoldSpec:
    k: int = 3
    grouping: str = "by_group_id"
    seed: int = 0
    assignments: dict = field(default_factory=dict)   # sample id -> fold index

    def folds(self) -> list[list[str]]:
        out = [[] for _ in range(self.k)]
        for sid, f in self.assignments.items():
            out[f].append(sid)
        return out


def _key(item, name):
    return item[name] if isinstance(item, dict) else getattr(item, name)


def kfold_split(items, spec: FoldSpec) -> FoldSpec:
    """Assign every manifest record (or Sample) to one of ``spec.k`` folds."""
    if spec.grouping not in GROUPINGS:
        raise ConfigError(f"unknown grouping {spec.grouping!r}; expected one of {GROUPINGS}")
    ids = [_key(it, "id") if isinstance(it, dict) else it.sample_id for it in items]
    if len(set(ids)) != len(ids):
        raise ConfigError("sample ids are not unique")
    if spec.k < 2:
        raise ConfigError(f"k must be >= 2, got {spec.k}")
    rng = SplitMix64(derive_seed(spec.seed, "kfold"))
    assignments = {}
    if spec.grouping == "by_augmented_image":
        if spec.k > len(ids):
            raise ConfigError(f"k={spec.k} exceeds the number of samples ({len(ids)})")
        perm = rng.permutation(len(ids))
        for pos, i in enumerate(perm):
            assignments[ids[i]] = pos * spec.k // len(ids)
    else:
        groups = {}
        for it, sid in zip(items, ids):
            diag = _key(it, "diagnosis")
            diag = diag.value if isinstance(diag, Diagnosis) else diag
            groups.setdefault(_key(it, "group_id"), (diag, []))[1].append(sid)
        if spec.k > len(groups):
            raise ConfigError(f"k={spec.k} exceeds the number of groups ({len(groups)})")
        counter = 0
        for diag in sorted({d for d, _ in groups.values()}):
            names = sorted(g for g, (d, _) in groups.items() if d == diag)
            for i in rng.child(diag).permutation(len(names)):
                for sid in groups[names[i]][1]:
                    assignments[sid] = counter % spec.k
                counter += 1
    return replace(spec, assignments={sid: assignments[sid] for sid in ids})


@dataclass
class ExperimentConfig:
    manifest: str
    task: str
    out_dir: str
    train: TrainConfig | None = None
    folds: FoldSpec = field(default_factory=FoldSpec)
    unet: UNetConfig = field(default_factory=UNetConfig)
    pretrain: str | None = None     # checkpoint path, "auto", or None
    pretrain_train: TrainConfig | None = None
    seed: int = 0
    size: tuple | None = None

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if not os.path.exists(self.manifest):
            raise ConfigError(f"manifest not found: {self.manifest}")
        if self.task in ("cls_dense_pretrain", "cls_sparse_pretrain"):
            if self.pretrain is None:
                schema = "dense" if self.task == "cls_dense_pretrain" else "sparse"
                raise ConfigError(
                    f"task {self.task} needs a {schema} segmentation checkpoint: pass "
                    f"--pretrain PATH (e.g. the output of train-seg --schema {schema}) "
                    f"or --pretrain auto")
            if self.pretrain != "auto" and not os.path.exists(self.pretrain):
                raise ConfigError(f"pretrain checkpoint not found: {self.pretrain}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds"].pop("assignments")
        return d


def _schema_for(task):
    return SPARSE if "sparse" in task else DENSE


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _seg_fold_metrics(w, test, task):
    """Sparse-scored metrics for every model, plus native dense metrics for dense models.

    Dense predictions are merged into sparse classes before sparse scoring.
    """
    if task == "seg_sparse":
        return {"sparse_scored": seg_metric_dict(evaluate_segmentation(w, test, SPARSE))}
    dense_conf, merged_conf = SegConfusion.empty(DENSE), SegConfusion.empty(SPARSE)
    x = np.stack([s.grey for s in test])[:, None]
    for i in range(0, len(test), 8):
        for s, pred in zip(test[i:i + 8], predict_labels(w, x[i:i + 8])):
            pred = LabelMap(DENSE, pred)
            dense_conf = dense_conf + seg_confusion(pred, s.labels)
            merged_conf = merged_conf + seg_confusion(
                merge_dense_prediction_for_sparse_scoring(pred), remap_dense_to_sparse(s.labels))
    return {"sparse_scored": seg_metric_dict(merged_conf), "dense": seg_metric_dict(dense_conf)}


def run_crossval(cfg: ExperimentConfig, samples=None) -> dict:
    """Train/evaluate every fold, persist per-fold artefacts, return the aggregate summary."""
    cfg.validate()
    samples = samples if samples is not None else load_dataset(cfg.manifest, size=cfg.size)
    folds = kfold_split(samples, cfg.folds)
    schema = _schema_for(cfg.task)
    is_seg = cfg.task.startswith("seg")
    tcfg = cfg.train or (SEG_DEFAULTS if is_seg else CLS_DEFAULTS)
    os.makedirs(cfg.out_dir, exist_ok=True)

    pretrained = None
    if cfg.pretrain not in (None, "auto") and not is_seg and cfg.task != "cls_scratch":
        pretrained = load_weights(cfg.pretrain)
        if pretrained.config.n_seg_classes != schema.n_classes:
            raise ConfigError(f"{cfg.pretrain} has {pretrained.config.n_seg_classes} output classes, "
                              f"task {cfg.task} needs {schema.n_classes}")

    per_fold = []
    for f in range(cfg.folds.k):
        fold_dir = os.path.join(cfg.out_dir, f"fold{f}")
        os.makedirs(fold_dir, exist_ok=True)
        test = [s for s in samples if folds.assignments[s.sample_id] == f]
        train = [s for s in samples if folds.assignments[s.sample_id] != f]
        seed = derive_seed(cfg.seed, f"fold{f}")
        fcfg = replace(tcfg, shuffle_seed=derive_seed(tcfg.shuffle_seed, f"fold{f}"))
        meta = {"fold": f, "task": cfg.task, "n_train": len(train), "n_test": len(test),
                "seed": seed}
        if is_seg:
            unet = replace(cfg.unet, n_seg_classes=schema.n_classes)
            w, hist = train_segmentation(train, schema, fcfg, seed, eval_samples=test, unet_cfg=unet)
            metrics = _seg_fold_metrics(w, test, cfg.task)
            meta["init"] = "scratch"
        else:
            fold_pre = pretrained
            if cfg.task == "cls_scratch":
                meta["init"] = "scratch"
            elif cfg.pretrain == "auto":
                unet = replace(cfg.unet, n_seg_classes=schema.n_classes)
                pcfg = replace(cfg.pretrain_train or SEG_DEFAULTS, shuffle_seed=fcfg.shuffle_seed)
                fold_pre, _ = train_segmentation(train, schema, pcfg, seed, unet_cfg=unet)
                path = os.path.join(fold_dir, "pretrain.rtw")
                save_weights(fold_pre, path)
                meta["init"] = f"pretrained:{schema.name}:{path}"
            else:
                meta["init"] = f"pretrained:{schema.name}:{cfg.pretrain}"
            unet = cfg.unet if fold_pre is None else fold_pre.config
            w, hist = train_classification(train, fcfg, fold_pre, seed, eval_samples=test,
                                           unet_cfg=unet)
            report = cls_report(predict_diagnoses(w, test), [s.diagnosis for s in test])
            metrics = {"classification": report.as_dict()}
        save_weights(w, os.path.join(fold_dir, "checkpoint.rtw"))
        hist.write(os.path.join(fold_dir, "history.jsonl"))
        meta.update(metrics=metrics, best_epoch=hist.best_epoch)
        _write_json(os.path.join(fold_dir, "metrics.json"), meta)
        per_fold.append(meta)
        log.info("fold %d done: %s", f, metrics)

    summary = summarize(cfg.task, per_fold)
    summary["config"] = cfg.to_dict()
    _write_json(os.path.join(cfg.out_dir, "aggregate.json"), summary)
    with open(os.path.join(cfg.out_dir, "report.txt"), "w") as fh:
        fh.write(render_report({cfg.task: summary}) + "\n")
    return summary


def summarize(task: str, per_fold: list[dict]) -> dict:
    aggs = {}
    for part in per_fold[0]["metrics"]:
        agg = fold_aggregate([m["metrics"][part] for m in per_fold])
        aggs[part] = {"mean": agg.mean, "std": agg.std}
    return {"task": task, "k": len(per_fold), "aggregate": aggs,
            "per_fold": [m["metrics"] for m in per_fold],
            "init": [m["init"] for m in per_fold]}


def _agg(summary, part):
    a = summary["aggregate"][part]
    return FoldAggregate(a["mean"], a["std"], summary["k"])


def render_report(summaries: dict) -> str:
    """Table-style text for any mix of segmentation and classification summaries."""
    seg_sparse, seg_dense, cls_rows = {}, {}, {}
    for task, summary in summaries.items():
        label = ROW_LABEL[task]
        if task.startswith("seg"):
            seg_sparse[label] = _agg(summary, "sparse_scored")
            if "dense" in summary["aggregate"]:
                seg_dense[label] = _agg(summary, "dense")
        else:
            cls_rows[label] = _agg(summary, "classification")
    parts = []
    if seg_sparse:
        parts.append("Segmentation pixel accuracy and IoU (mean ± std over folds)\n"
                     + seg_table(seg_sparse, seg_dense))
    if cls_rows:
        parts.append("Diagnostic classification (mean ± std over folds)\n" + cls_table(cls_rows))
    return "\n\n".join(parts)
