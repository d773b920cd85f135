"""Pretrain dense/sparse U-Nets, then compare classifier initialisations by 3-fold grouped CV.

    python scripts/run_reverse_transfer.py --out runs/reverse_transfer
"""

import argparse
import json
import os
from dataclasses import replace

from revtransfer.experiments import (ReverseTransferConfig, directional_check, mean_accuracy,
                                     reverse_transfer_run)
from revtransfer.train import CLS_DEFAULTS


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/reverse_transfer")
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--groups", type=int, default=30, help="diagnostic groups per class")
    ap.add_argument("--cls-epochs", type=int, default=CLS_DEFAULTS.epochs)
    args = ap.parse_args()

    cfg = ReverseTransferConfig(size=args.size, diag_groups=args.groups,
                                cls_train=replace(CLS_DEFAULTS, epochs=args.cls_epochs))
    result = reverse_transfer_run(cfg, args.out)
    accs = {t: mean_accuracy(result, t) for t in cfg.tasks}
    print(result["report"])
    ok = directional_check(accs["cls_dense_pretrain"], accs["cls_sparse_pretrain"], accs["cls_scratch"])
    print(f"directional ordering holds: {ok}  ({result['seconds']:.0f}s)")
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump({"mean_accuracy": accs, "directional": ok, "seconds": result["seconds"]}, fh, indent=2)


if __name__ == "__main__":
    main()
