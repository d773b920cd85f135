"""Command-line harness: ``revtransfer <subcommand> [flags]``.

Every subcommand takes ``--seed``, ``--config`` and ``--out``. A config file
is a JSON object whose keys are flag names (``batch-size`` or ``batch_size``);
flags given on the command line win over the file.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from . import pnm
from .augment import expand_sixfold
from .crossval import GROUPINGS, TASKS, ConfigError, ExperimentConfig, FoldSpec, run_crossval
from .dataset import load_dataset, write_dataset
from .gradcheck import CASES, run_gradchecks
from .labels import DENSE, SPARSE, LabelMap, SchemaError, colorize, get_schema, remap_dense_to_sparse
from .metrics import cls_report, iou_scores, seg_metric_dict
from .phantom import PRESETS, gen_dataset
from .train import (CLS_DEFAULTS, SEG_DEFAULTS, TrainConfig, TrainingError, evaluate_segmentation,
                    predict_diagnoses, train_classification, train_segmentation)
from .unet import CheckpointError, UNetConfig, load_weights, predict_labels, save_weights

log = logging.getLogger("revtransfer")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; we reserve 2 for runtime failures
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p, out_help):
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--config", help="JSON file of flag defaults")
    p.add_argument("--out", required=True, help=out_help)
    p.add_argument("-v", "--verbose", action="store_true")


def _train_flags(p, defaults: TrainConfig):
    p.add_argument("--epochs", type=int, default=defaults.epochs)
    p.add_argument("--lr", type=float, default=defaults.lr)
    p.add_argument("--batch-size", type=int, default=defaults.batch_size)
    p.add_argument("--plateau-patience", type=int, default=defaults.plateau_patience)
    p.add_argument("--plateau-factor", type=float, default=defaults.plateau_factor)
    p.add_argument("--eval-split", choices=("test", "validation"), default=defaults.eval_split)


def _model_flags(p):
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base-channels", type=int, default=8)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"),
                   help="resize images and labels at load time")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="revtransfer", description="Synthetic lung-ultrasound reverse transfer "
                     "learning: data generation, training, evaluation and cross-validation.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a labelled phantom dataset")
    _common(p, "output directory")
    p.add_argument("--preset", choices=sorted(PRESETS), default="demo")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--noise-free", action="store_true")

    p = sub.add_parser("augment", help="expand a dataset six-fold (flip x intensity scale)")
    _common(p, "output directory")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("remap", help="rewrite dense labels as sparse labels")
    _common(p, "output directory")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("train-seg", help="train a segmentation U-Net")
    _common(p, "checkpoint path (history written next to it)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--schema", choices=("dense", "sparse"), default="dense")
    p.add_argument("--eval-manifest", help="held-out set scored each epoch")
    _train_flags(p, SEG_DEFAULTS)
    _model_flags(p)

    p = sub.add_parser("train-cls", help="train the diagnosis classifier")
    _common(p, "checkpoint path (history written next to it)")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pretrain", help="segmentation checkpoint to start from")
    p.add_argument("--freeze", action="store_true", help="train the head only")
    p.add_argument("--eval-manifest")
    _train_flags(p, CLS_DEFAULTS)
    _model_flags(p)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    _common(p, "JSON metrics path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--size", type=int, nargs=2, metavar=("H", "W"))

    p = sub.add_parser("crossval", help="k-fold cross-validated experiment")
    _common(p, "experiment directory")
    p.add_argument("--manifest", required=True)
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--pretrain", help="segmentation checkpoint, or 'auto' to pretrain per fold")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--grouping", choices=GROUPINGS, default="by_group_id")
    p.add_argument("--paper-protocol", action="store_true",
                   help="random split over augmented images, scored on the test fold each epoch")
    p.add_argument("--pretrain-epochs", type=int, default=SEG_DEFAULTS.epochs)
    _train_flags(p, TrainConfig(epochs=0))
    _model_flags(p)

    p = sub.add_parser("render", help="PPM grid of image, ground truth and prediction")
    _common(p, "PPM path")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=4, help="number of samples (rows)")
    p.add_argument("--schema", choices=("dense", "sparse"))

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    _common(p, "JSON report path")
    p.add_argument("--layers", nargs="+", choices=sorted(CASES))
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--tolerance", type=float, default=1e-4)
    return parser


def _subparser(parser, name):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def parse_args(argv):
    """Apply ``--config`` values as subcommand defaults, then parse the flags."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, rest = pre.parse_known_args(argv)
    command = next((a for a in rest if not a.startswith("-")), None)
    if known.config and command in COMMANDS:
        try:
            with open(known.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {known.config}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError(f"config {known.config} must be a JSON object")
        sp = _subparser(parser, command)
        actions = {a.dest: a for a in sp._actions}
        defaults = {}
        for key, value in cfg.items():
            dest = key.lstrip("-").replace("-", "_")
            if dest not in actions or dest in ("config", "help"):
                raise UsageError(f"config {known.config}: unknown key {key!r} for {command}")
            defaults[dest] = value
            # a required flag supplied by the file is no longer required
            actions[dest].required = False
        sp.set_defaults(**defaults)
    return parser.parse_args(argv)


def _train_cfg(args, base: TrainConfig) -> TrainConfig:
    return replace(base, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                   plateau_patience=args.plateau_patience, plateau_factor=args.plateau_factor,
                   eval_split=args.eval_split, shuffle_seed=args.seed)


def _unet_cfg(args, n_classes=7) -> UNetConfig:
    return UNetConfig(depth=args.depth, base_channels=args.base_channels, n_seg_classes=n_classes)


def _load(path, size=None):
    if not os.path.exists(path):
        raise ConfigError(f"manifest not found: {path}")
    return load_dataset(path, size=tuple(size) if size else None)


def _checkpoint_side(path, name):
    stem = os.path.splitext(path)[0]
    return f"{stem}.{name}"


def cmd_gen_data(args):
    spec = PRESETS[args.preset]
    spec = replace(spec, height=args.height or spec.height, width=args.width or spec.width,
                   noise_free=args.noise_free or spec.noise_free)
    samples, _ = gen_dataset(spec, args.seed)
    path = write_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {path}")


def cmd_augment(args):
    samples = expand_sixfold(_load(args.manifest))
    print(f"wrote {len(samples)} samples to {write_dataset(samples, args.out)}")


def cmd_remap(args):
    samples = _load(args.manifest)
    out = []
    for s in samples:
        if s.labels.schema != DENSE:
            raise SchemaError(f"sample {s.sample_id} is already {s.labels.schema.name}")
        out.append(s.with_(labels=remap_dense_to_sparse(s.labels)))
    print(f"wrote {len(out)} samples to {write_dataset(out, args.out)}")


def cmd_train_seg(args):
    schema = get_schema(args.schema)
    samples = _load(args.manifest, args.size)
    held = _load(args.eval_manifest, args.size) if args.eval_manifest else None
    w, hist = train_segmentation(samples, schema, _train_cfg(args, SEG_DEFAULTS), args.seed,
                                 eval_samples=held, unet_cfg=_unet_cfg(args, schema.n_classes))
    save_weights(w, args.out)
    hist.write(_checkpoint_side(args.out, "history.jsonl"))
    print(f"best mean IoU {hist.best_metric:.4f} at epoch {hist.best_epoch}; saved {args.out}")


def cmd_train_cls(args):
    samples = _load(args.manifest, args.size)
    held = _load(args.eval_manifest, args.size) if args.eval_manifest else None
    pre = None
    if args.pretrain:
        if not os.path.exists(args.pretrain):
            raise ConfigError(f"pretrain checkpoint not found: {args.pretrain}")
        pre = load_weights(args.pretrain)
    cfg = replace(_train_cfg(args, CLS_DEFAULTS), freeze_seg_weights=args.freeze)
    if args.freeze and pre is None:
        raise ConfigError("--freeze needs --pretrain")
    w, hist = train_classification(samples, cfg, pre, args.seed, eval_samples=held,
                                   unet_cfg=None if pre else _unet_cfg(args))
    save_weights(w, args.out)
    hist.write(_checkpoint_side(args.out, "history.jsonl"))
    print(f"best accuracy {hist.best_metric:.4f} at epoch {hist.best_epoch}; saved {args.out}")


def cmd_eval(args):
    w = load_weights(args.checkpoint)
    samples = _load(args.manifest, args.size)
    out = {"checkpoint": args.checkpoint, "n_samples": len(samples)}
    if w.head is not None:
        report = cls_report(predict_diagnoses(w, samples), [s.diagnosis for s in samples])
        out["classification"] = report.as_dict()
    else:
        schema = DENSE if w.config.n_seg_classes == DENSE.n_classes else SPARSE
        out["segmentation"] = seg_metric_dict(evaluate_segmentation(w, samples, schema))
        out["schema"] = schema.name
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(json.dumps(out, indent=2, sort_keys=True, default=float))


def _grey_rgb(grey):
    return np.repeat(pnm.grey_to_bytes(grey)[..., None], 3, axis=2)


def cmd_render(args):
    samples = _load(args.manifest)[:args.n]
    if not samples:
        raise ConfigError("manifest has no samples")
    w = load_weights(args.checkpoint) if args.checkpoint else None
    schema = get_schema(args.schema) if args.schema else samples[0].labels.schema
    if w is not None and w.config.n_seg_classes != schema.n_classes:
        schema = SPARSE if w.config.n_seg_classes == SPARSE.n_classes else DENSE
    rows = []
    for s in samples:
        gt = s.labels
        if gt.schema != schema:
            gt = remap_dense_to_sparse(gt)
        tiles = [_grey_rgb(s.grey), colorize(gt)]
        if w is not None:
            pred = predict_labels(w, s.grey[None, None].astype(np.float32))[0]
            tiles.append(colorize(LabelMap(schema, pred)))
        gap = np.full((s.grey.shape[0], 2, 3), 255, np.uint8)
        row = tiles[0]
        for t in tiles[1:]:
            row = np.concatenate([row, gap, t], axis=1)
        rows.append(row)
        rows.append(np.full((2, row.shape[1], 3), 255, np.uint8))
    pnm.write_ppm(args.out, np.concatenate(rows[:-1], axis=0))
    print(f"wrote {args.out}")


def cmd_crossval(args):
    grouping = "by_augmented_image" if args.paper_protocol else args.grouping
    is_seg = args.task.startswith("seg")
    base = SEG_DEFAULTS if is_seg else CLS_DEFAULTS
    if args.epochs == 0:
        args.epochs = base.epochs
    tcfg = _train_cfg(args, base)
    if args.paper_protocol:
        tcfg = replace(tcfg, eval_split="test")
    cfg = ExperimentConfig(
        manifest=args.manifest, task=args.task, out_dir=args.out, train=tcfg,
        folds=FoldSpec(k=args.k, grouping=grouping, seed=args.seed),
        unet=_unet_cfg(args), pretrain=args.pretrain,
        pretrain_train=replace(SEG_DEFAULTS, epochs=args.pretrain_epochs),
        seed=args.seed, size=tuple(args.size) if args.size else None)
    cfg.validate()
    summary = run_crossval(cfg)
    print(open(os.path.join(args.out, "report.txt")).read(), end="")
    return summary


def cmd_gradcheck(args):
    results = run_gradchecks(range(args.seeds), args.layers)
    worst = 0.0
    for r in results:
        print(f"{r.layer:20s} max rel error {r.max_rel_error:.3e}  ({r.seconds:.1f}s)")
        worst = max(worst, r.max_rel_error)
    with open(args.out, "w") as fh:
        json.dump({"tolerance": args.tolerance, "seeds": args.seeds,
                   "layers": {r.layer: r.max_rel_error for r in results}}, fh, indent=2)
        fh.write("\n")
    if worst >= args.tolerance:
        raise TrainingError(f"gradient check failed: {worst:.3e} >= {args.tolerance:g}")


COMMANDS = {"gen-data": cmd_gen_data, "augment": cmd_augment, "remap": cmd_remap,
            "train-seg": cmd_train_seg, "train-cls": cmd_train_cls, "eval": cmd_eval,
            "crossval": cmd_crossval, "render": cmd_render, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, SchemaError, CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
