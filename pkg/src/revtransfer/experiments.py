"""End-to-end experiment recipes shared by ``scripts/`` and the acceptance tests."""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, replace

from .augment import expand_sixfold
from .crossval import ExperimentConfig, FoldSpec, render_report, run_crossval
from .dataset import write_dataset
from .labels import DENSE, SPARSE
from .metrics import iou_scores
from .phantom import PRESETS, DatasetSpec, gen_dataset
from .train import CLS_DEFAULTS, SEG_DEFAULTS, TrainConfig, evaluate_segmentation, train_segmentation
from .unet import UNetConfig, save_weights


@dataclass(frozen=True)
class OverfitConfig:
    n_samples: int = 8
    size: int = 64
    epochs: int = 200
    # 8 images at batch 4 give only 2 steps per epoch, and the epoch-based
    # plateau rule then halves lr before the net has moved; batch 1 gives 8
    batch_size: int = 1
    unet: UNetConfig = UNetConfig(depth=3, base_channels=8, n_seg_classes=7)
    seed: int = 11


def overfit_run(cfg: OverfitConfig = OverfitConfig()) -> dict:
    """Train on a handful of noise-free phantoms and score on the same images."""
    spec = DatasetSpec(groups={"Normal": 3, "Pneumonia": 2, "COVID-19": 3}, frames=(1, 1),
                       height=cfg.size, width=cfg.size, noise_free=True)
    samples, _ = gen_dataset(spec, cfg.seed)
    samples = samples[:cfg.n_samples]
    t0 = time.perf_counter()
    tcfg = TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch_size)
    w, hist = train_segmentation(samples, DENSE, tcfg, cfg.seed, unet_cfg=cfg.unet)
    scores = iou_scores(evaluate_segmentation(w, samples, DENSE))
    return {"pixel_accuracy": scores.pixel_accuracy, "mean_iou": scores.mean_iou,
            "best_epoch": hist.best_epoch, "seconds": time.perf_counter() - t0,
            "final_loss": hist.records[-1]["train_loss"]}


def augmentation_run(seed: int = 0, size: int = 64):
    """152 generated images of the semantic preset, expanded six-fold."""
    spec = replace(PRESETS["semantic-lung"], height=size, width=size)
    samples, _ = gen_dataset(spec, seed)
    return samples, expand_sixfold(samples)


@dataclass(frozen=True)
class ReverseTransferConfig:
    """Pretrain dense and sparse U-Nets on one phantom set, then cross-validate
    the three classifier initialisations on a separate, balanced diagnostic set."""
    size: int = 64
    unet: UNetConfig = UNetConfig(depth=3, base_channels=8)
    pretrain_groups: int = 4          # per diagnosis
    pretrain_frames: int = 3
    pretrain_train: TrainConfig = SEG_DEFAULTS
    diag_groups: int = 30             # per diagnosis
    diag_frames: tuple = (1, 3)
    cls_train: TrainConfig = CLS_DEFAULTS
    k: int = 3
    pretrain_seed: int = 101         # pretraining phantoms
    pretrain_init_seed: int = 1      # pretraining weight init
    data_seed: int = 202
    fold_seed: int = 0
    cv_seed: int = 5
    tasks: tuple = ("cls_dense_pretrain", "cls_sparse_pretrain", "cls_scratch")


def reverse_transfer_run(cfg: ReverseTransferConfig, out_dir: str, log=print) -> dict:
    """Returns {task: crossval summary} plus timing; artefacts land in ``out_dir``."""
    os.makedirs(out_dir, exist_ok=True)
    t0 = time.perf_counter()
    pre_spec = DatasetSpec(groups={d: cfg.pretrain_groups for d in ("Normal", "Pneumonia", "COVID-19")},
                           frames=(cfg.pretrain_frames, cfg.pretrain_frames),
                           height=cfg.size, width=cfg.size)
    pre_samples, _ = gen_dataset(pre_spec, cfg.pretrain_seed)
    checkpoints = {}
    for schema in (DENSE, SPARSE):
        w, hist = train_segmentation(pre_samples, schema, cfg.pretrain_train, cfg.pretrain_init_seed,
                                     unet_cfg=replace(cfg.unet, n_seg_classes=schema.n_classes))
        checkpoints[schema.name] = os.path.join(out_dir, f"pretrain_{schema.name}.rtw")
        save_weights(w, checkpoints[schema.name])
        log(f"pretrained {schema.name}: best mean IoU {hist.best_metric:.4f} "
            f"({time.perf_counter() - t0:.0f}s)")

    diag_spec = DatasetSpec(groups={d: cfg.diag_groups for d in ("Normal", "Pneumonia", "COVID-19")},
                            frames=cfg.diag_frames, height=cfg.size, width=cfg.size)
    diag, _ = gen_dataset(diag_spec, cfg.data_seed)
    manifest = write_dataset(diag, os.path.join(out_dir, "diagnostic"))
    pretrain_for = {"cls_dense_pretrain": checkpoints["dense"],
                    "cls_sparse_pretrain": checkpoints["sparse"], "cls_scratch": None}
    summaries = {}
    for task in cfg.tasks:
        exp = ExperimentConfig(manifest=manifest, task=task, out_dir=os.path.join(out_dir, task),
                               train=cfg.cls_train, folds=FoldSpec(k=cfg.k, seed=cfg.fold_seed),
                               unet=cfg.unet, pretrain=pretrain_for[task], seed=cfg.cv_seed)
        # read back from disk so the run sees exactly what the CLI would
        summaries[task] = run_crossval(exp)
        acc = summaries[task]["aggregate"]["classification"]["mean"]["accuracy"]
        log(f"{task}: mean accuracy {acc:.4f} ({time.perf_counter() - t0:.0f}s)")
    return {"summaries": summaries, "n_diagnostic": len(diag), "seconds": time.perf_counter() - t0,
            "report": render_report(summaries)}


def mean_accuracy(result: dict, task: str) -> float:
    return result["summaries"][task]["aggregate"]["classification"]["mean"]["accuracy"]


def directional_check(dense: float, sparse: float, scratch: float, slack: float = 0.02) -> bool:
    """Ordering dense >= sparse >= scratch - slack, or dense beating scratch by slack."""
    return (dense >= sparse >= scratch - slack) or (dense - scratch >= slack)
