"""Six-fold augmentation: {identity, left-right flip} x grey scales {0.8, 1.0, 1.1}."""

from __future__ import annotations

import numpy as np

from .dataset import Sample
from .labels import LabelMap

SCALE_RANGE = (0.8, 1.1)
SCALES = (0.8, 1.0, 1.1)


def flip_lr(s: Sample) -> Sample:
    return s.with_(grey=s.grey[:, ::-1].copy(),
                   labels=LabelMap(s.labels.schema, s.labels.pixels[:, ::-1].copy()))


def intensity_scale(s: Sample, factor: float) -> Sample:
    """Multiply grey values by ``factor`` and clamp to [0, 1]; labels are shared, not copied."""
    lo, hi = SCALE_RANGE
    if not lo <= factor <= hi:
        raise ValueError(f"scale factor {factor} outside [{lo}, {hi}]")
    if factor == 1.0:
        return s.with_(grey=s.grey.copy())
    grey = np.clip(s.grey * np.float32(factor), 0.0, 1.0).astype(np.float32)
    return s.with_(grey=grey)


def augment_tag(flipped: bool, factor: float) -> str:
    return f"{'flip+' if flipped else ''}scale{factor:g}"


def expand_sixfold(samples) -> list[Sample]:
    """Six variants per sample, in (no flip, flip) x SCALES order."""
    out = []
    for s in samples:
        for flipped in (False, True):
            base = flip_lr(s) if flipped else s
            for factor in SCALES:
                tag = augment_tag(flipped, factor)
                v = intensity_scale(base, factor)
                out.append(v.with_(augment=tag, sample_id=f"{s.sample_id}_{tag}"))
    return out
