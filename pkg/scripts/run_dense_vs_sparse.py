"""Segmentation table: dense vs sparse labels on the augmented 152-image phantom set.

Generates the semantic preset, expands it six-fold, then cross-validates a
dense and a sparse U-Net. Dense predictions are merged to sparse classes for
the shared columns. Defaults are sized for a laptop; raise --size/--epochs
for full-scale settings.

    python scripts/run_dense_vs_sparse.py --out runs/dense_vs_sparse
    python scripts/run_dense_vs_sparse.py --paper-protocol   # random split over augmented images
"""

import argparse
import os
from dataclasses import replace

from revtransfer.crossval import ExperimentConfig, FoldSpec, render_report, run_crossval
from revtransfer.dataset import write_dataset
from revtransfer.experiments import augmentation_run
from revtransfer.train import SEG_DEFAULTS
from revtransfer.unet import UNetConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/dense_vs_sparse")
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--paper-protocol", action="store_true")
    args = ap.parse_args()

    _, augmented = augmentation_run(args.seed, args.size)
    manifest = write_dataset(augmented, os.path.join(args.out, "data"))
    grouping = "by_augmented_image" if args.paper_protocol else "by_group_id"
    summaries = {}
    for task in ("seg_sparse", "seg_dense"):
        cfg = ExperimentConfig(manifest=manifest, task=task, out_dir=os.path.join(args.out, task),
                               train=replace(SEG_DEFAULTS, epochs=args.epochs, shuffle_seed=args.seed),
                               folds=FoldSpec(k=3, grouping=grouping, seed=args.seed),
                               unet=UNetConfig(depth=3, base_channels=8), seed=args.seed)
        summaries[task] = run_crossval(cfg)
    print(render_report(summaries))


if __name__ == "__main__":
    main()
