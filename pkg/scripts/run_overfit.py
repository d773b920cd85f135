"""Overfit a depth-3 U-Net on 8 noise-free phantoms and report train pixel accuracy."""

import argparse

from revtransfer.experiments import OverfitConfig, overfit_run


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=11)
    ap.add_argument("--batch-size", type=int, default=1)
    args = ap.parse_args()
    res = overfit_run(OverfitConfig(epochs=args.epochs, size=args.size, seed=args.seed,
                                    batch_size=args.batch_size))
    print(f"pixel accuracy {res['pixel_accuracy']:.4f}  mean IoU {res['mean_iou']:.4f}  "
          f"best epoch {res['best_epoch']}  {res['seconds']:.0f}s")


if __name__ == "__main__":
    main()
