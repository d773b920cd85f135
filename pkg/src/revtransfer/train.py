"""Adam + plateau-scheduled training for segmentation and reverse-transfer classification."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .dataset import Diagnosis, Sample
from .labels import DENSE, SPARSE, LabelMap, LabelSchema, SchemaError, remap_dense_to_sparse
from .metrics import SegConfusion, cls_report, iou_scores, seg_confusion
from .rng import SplitMix64, derive_seed
from .unet import (ClassifierConfig, ModelWeights, UNetConfig, attach_cls_head, build_unet,
                   head_probs, param_nodes, predict_labels, cls_forward, unet_logits)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 4
    epochs: int = 50
    plateau_factor: float = 0.5
    plateau_patience: int = 5
    plateau_min_delta: float = 1e-4
    shuffle_seed: int = 0
    freeze_seg_weights: bool = False
    eval_split: str = "test"        # "test" scores the test fold each epoch, "validation" holds out
    validation_fraction: float = 0.2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must lie in (0, 1), got {self.plateau_factor}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.plateau_patience < 1:
            raise ValueError("plateau_patience must be >= 1")
        if self.eval_split not in ("test", "validation"):
            raise ValueError(f"eval_split must be 'test' or 'validation', got {self.eval_split!r}")


SEG_DEFAULTS = TrainConfig(epochs=50)
CLS_DEFAULTS = TrainConfig(epochs=12)


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)   # {epoch, train_loss, eval_metric, lr}
    best_epoch: int | None = None
    best_metric: float = -np.inf

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @property
    def lrs(self) -> list[float]:
        return [r["lr"] for r in self.records]


# -- optimiser and scheduler -----------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1=0.9, beta2=0.999, eps=1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update for every name in ``grads``; returns new arrays."""
    t = state.t + 1
    new_params, m_new, v_new = dict(params), dict(state.m), dict(state.v)
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"adam: gradient {g.shape} does not match parameter {name!r} {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name, np.zeros_like(p)) * dt(beta1) + g * dt(1 - beta1)
        v = state.v.get(name, np.zeros_like(p)) * dt(beta2) + (g * g) * dt(1 - beta2)
        step = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        new_params[name] = (p - dt(lr) * step).astype(p.dtype)
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


class PlateauScheduler:
    """Multiply lr by ``factor`` after ``patience`` consecutive epochs without a
    gain larger than ``min_delta`` in a higher-is-better metric."""

    def __init__(self, lr, factor=0.5, patience=5, min_delta=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = -np.inf
        self.bad_epochs = 0

    def step(self, metric: float) -> float:
        if metric > self.best + self.min_delta:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def plateau_scheduler(metrics, cfg: TrainConfig) -> float:
    """Learning rate after replaying a metric sequence (one value per epoch)."""
    if len(metrics) < 1:
        raise ValueError("need at least one recorded epoch")
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta)
    for m in metrics:
        sched.step(m)
    return sched.lr


# -- data helpers ---------------------------------------------------------------------

def _stack_grey(samples) -> np.ndarray:
    return np.stack([s.grey for s in samples])[:, None].astype(np.float32)


def _labels_for(samples, schema: LabelSchema) -> np.ndarray:
    out = []
    for s in samples:
        lm = s.labels
        if lm.schema != schema:
            if lm.schema == DENSE and schema == SPARSE:
                lm = remap_dense_to_sparse(lm)
            else:
                raise SchemaError(f"sample {s.sample_id} has {lm.schema.name} labels, "
                                  f"cannot train a {schema.name} model")
        out.append(lm.pixels)
    return np.stack(out)


def _split_eval(samples, eval_samples, cfg: TrainConfig, seed):
    """Training set and per-epoch evaluation set for the configured eval split."""
    if cfg.eval_split == "test":
        return list(samples), list(eval_samples) if eval_samples else list(samples)
    groups = sorted({s.group_id for s in samples})
    order = SplitMix64(derive_seed(seed, "validation-split")).permutation(len(groups))
    n_val = max(1, int(round(cfg.validation_fraction * len(groups))))
    held = {groups[i] for i in order[:n_val]}
    train = [s for s in samples if s.group_id not in held]
    if not train:
        raise ValueError("validation split left no training samples")
    return train, [s for s in samples if s.group_id in held]


def _batches(n, batch_size, shuffle_seed, epoch):
    order = SplitMix64(derive_seed(shuffle_seed, epoch)).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def evaluate_segmentation(w: ModelWeights, samples, schema: LabelSchema,
                          batch_size: int = 8) -> SegConfusion:
    """Dataset-wide confusion of argmax predictions against ``schema`` labels."""
    conf = SegConfusion.empty(schema)
    x, y = _stack_grey(samples), _labels_for(samples, schema)
    for i in range(0, len(samples), batch_size):
        pred = predict_labels(w, x[i:i + batch_size])
        for p, g in zip(pred, y[i:i + batch_size]):
            conf = conf + seg_confusion(LabelMap(schema, p), LabelMap(schema, g))
    return conf


def predict_diagnoses(w: ModelWeights, samples, batch_size: int = 8) -> list[Diagnosis]:
    x = _stack_grey(samples)
    out = []
    for i in range(0, len(samples), batch_size):
        probs = cls_forward(w, x[i:i + batch_size]).value
        out += [Diagnosis.from_index(int(k)) for k in probs.argmax(axis=1)]
    return out


def _fit(w: ModelWeights, x, y, trainable, loss_fn, eval_fn, cfg: TrainConfig, what: str):
    history = TrainHistory()
    sched = PlateauScheduler(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta)
    state = AdamState()
    best = w
    params = dict(w.params)
    for epoch in range(1, cfg.epochs + 1):
        lr = sched.lr
        losses = []
        for step, idx in enumerate(_batches(len(x), cfg.batch_size, cfg.shuffle_seed, epoch)):
            current = ModelWeights(w.config, params, w.head, w.version)
            nodes = param_nodes(current, trainable)
            loss = loss_fn(nodes, x[idx], y[idx])
            if not np.isfinite(loss.value):
                raise TrainingError(f"{what}: non-finite loss {loss.value} at epoch {epoch}, "
                                    f"step {step} (lr {lr:g})")
            ad.backward(loss, [nodes[k] for k in trainable])
            grads = {k: nodes[k].grad for k in trainable}
            params, state = adam_step(params, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            bad = [k for k in trainable if not np.all(np.isfinite(params[k]))]
            if bad:
                raise TrainingError(f"{what}: parameter {bad[0]!r} became non-finite at epoch "
                                    f"{epoch}, step {step} (lr {lr:g})")
            losses.append(float(loss.value))
        current = ModelWeights(w.config, params, w.head, w.version)
        metric = float(eval_fn(current))
        history.records.append({"epoch": epoch, "train_loss": float(np.mean(losses)),
                                "eval_metric": metric, "lr": lr})
        log.info("%s epoch %d loss %.4f metric %.4f lr %g", what, epoch, np.mean(losses), metric, lr)
        if metric > history.best_metric:
            history.best_metric, history.best_epoch = metric, epoch
            best = current.copy()
        sched.step(metric)
    return best, history


def train_segmentation(samples, schema: LabelSchema, cfg: TrainConfig = SEG_DEFAULTS,
                       seed: int = 0, eval_samples=None,
                       unet_cfg: UNetConfig | None = None) -> tuple[ModelWeights, TrainHistory]:
    """Train a U-Net on pixel cross-entropy; keeps the epoch with the best mean IoU."""
    cfg.validate()
    if not samples:
        raise ValueError("empty training set")
    unet_cfg = unet_cfg or UNetConfig(n_seg_classes=schema.n_classes)
    if unet_cfg.n_seg_classes != schema.n_classes:
        raise SchemaError(f"U-Net has {unet_cfg.n_seg_classes} outputs, {schema.name} schema "
                          f"has {schema.n_classes} classes")
    train, held = _split_eval(samples, eval_samples, cfg, seed)
    x, y = _stack_grey(train), _labels_for(train, schema)
    _labels_for(held, schema)
    w = build_unet(unet_cfg, seed)

    def loss_fn(nodes, xb, yb):
        logits = unet_logits(nodes, unet_cfg, ad.constant(xb))
        return ad.cross_entropy_pixelwise(ad.softmax_channels(logits), yb.astype(np.int64))

    def eval_fn(current):
        return iou_scores(evaluate_segmentation(current, held, schema)).mean_iou

    return _fit(w, x, y, list(w.params), loss_fn, eval_fn, cfg, f"seg-{schema.name}")


def train_classification(samples, cfg: TrainConfig = CLS_DEFAULTS,
                         pretrained: ModelWeights | None = None, seed: int = 0,
                         eval_samples=None, unet_cfg: UNetConfig | None = None,
                         ) -> tuple[ModelWeights, TrainHistory]:
    """Attach the pooling head and train on image-level diagnosis cross-entropy.

    With ``pretrained`` the U-Net starts from those segmentation weights;
    without it the same architecture is randomly initialised.
    """
    cfg.validate()
    if not samples:
        raise ValueError("empty training set")
    if pretrained is not None:
        if unet_cfg is not None and unet_cfg != pretrained.config:
            raise ValueError(f"pretrained architecture {pretrained.config} does not match {unet_cfg}")
        base = ModelWeights(pretrained.config,
                            {k: pretrained.params[k] for k in pretrained.seg_param_names()})
    else:
        base = build_unet(unet_cfg or UNetConfig(), seed)
    w = attach_cls_head(base, ClassifierConfig(n_seg_classes=base.config.n_seg_classes), seed)
    trainable = [k for k in w.params if k.startswith("head.")] if cfg.freeze_seg_weights \
        else list(w.params)

    train, held = _split_eval(samples, eval_samples, cfg, seed)
    x = _stack_grey(train)
    y = np.array([s.diagnosis.index for s in train], dtype=np.int64)

    def loss_fn(nodes, xb, yb):
        probs = head_probs(nodes, unet_logits(nodes, w.config, ad.constant(xb)))
        return ad.cross_entropy_pixelwise(probs, yb)

    def eval_fn(current):
        return cls_report(predict_diagnoses(current, held), [s.diagnosis for s in held]).accuracy

    return _fit(w, x, y, trainable, loss_fn, eval_fn, cfg, "cls")
