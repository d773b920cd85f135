"""Synthetic lung B-scan phantoms with pixel-exact dense labels.

The geometry is cartoon-level, not an acoustic simulation:

* soft tissue with faint horizontal layering above a bright, gently curved
  pleural band at depth ``d(x)``;
* A-line reverberations at depths ``k * d(x)`` (k = 2, 3, ...) whose
  brightness decays geometrically, only in columns free of B-lines;
* B-lines: bright vertical streaks from the pleura to the bottom edge,
  flanked by a halo labelled "unhealthy region";
* depth attenuation ``exp(-decay * row)`` and multiplicative speckle.

Speckle factors are ``1 + s * (r - 1)`` with ``r`` Rayleigh-distributed with
unit mean, i.e. ``r = sqrt(-(4 / pi) * ln(1 - u))`` for ``u`` uniform from
the SplitMix64 stream of the sample seed.

The diagnosis-to-geometry rules in :func:`gen_dataset` are invented so the
classification task is learnable; they carry no clinical meaning.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Diagnosis, Sample
from .labels import (A_LINE, B_LINE, BACKGROUND, DENSE, HEALTHY_PL, HEALTHY_REGION,
                     UNHEALTHY_PL, UNHEALTHY_REGION, LabelMap)
from .rng import SplitMix64, derive_seed

TISSUE_LEVEL = 0.30
PLEURA_LEVEL = 0.95
HEALTHY_LEVEL = 0.08
UNHEALTHY_LEVEL = 0.15
B_LINE_LEVEL = 0.85
A_LINE_LEVEL = 0.70
A_LINE_DECAY = 0.7


@dataclass(frozen=True)
class PhantomParams:
    height: int = 64
    width: int = 64
    pleura_depth: float = 0.25          # fraction of height
    pleura_thickness: int = 2           # px
    pleura_curvature: float = 2.0       # px, upward bulge at the centre
    n_alines: int = 3
    b_lines: tuple = ()                 # ((centre column fraction, core width px), ...)
    b_line_halo: int = 2                # px of unhealthy region each side of a core
    speckle: float = 0.4
    decay: float = 0.008                # attenuation per row

    def validate(self) -> None:
        if self.height < 8 or self.width < 8:
            raise ValueError(f"image must be at least 8x8, got {self.height}x{self.width}")
        if not 0.1 < self.pleura_depth < 0.5:
            raise ValueError(f"pleura_depth must lie in (0.1, 0.5), got {self.pleura_depth}")
        if self.pleura_thickness < 1:
            raise ValueError("pleura_thickness must be >= 1")
        if self.pleura_curvature < 0:
            raise ValueError("pleura_curvature must be >= 0")
        if not 0 <= self.n_alines <= 4:
            raise ValueError(f"n_alines must lie in [0, 4], got {self.n_alines}")
        if not 0.0 <= self.speckle <= 1.0:
            raise ValueError(f"speckle must lie in [0, 1], got {self.speckle}")
        if self.decay < 0 or self.b_line_halo < 0:
            raise ValueError("decay and b_line_halo must be non-negative")
        for centre, width in self.b_lines:
            if width < 1:
                raise ValueError(f"B-line width must be >= 1 px, got {width}")
            if not 0.0 <= centre <= 1.0:
                raise ValueError(f"B-line centre fraction must lie in [0, 1], got {centre}")
        top = round(self.pleura_depth * self.height)
        if top - self.pleura_curvature < 1 or top + self.pleura_thickness >= self.height - 1:
            raise ValueError("pleural band does not fit inside the image")


def pleura_top(p: PhantomParams) -> np.ndarray:
    """Row index of the pleural band's upper edge for every column."""
    x = np.arange(p.width)
    bulge = p.pleura_curvature * np.sin(np.pi * x / max(p.width - 1, 1))
    return np.round(p.pleura_depth * p.height - bulge).astype(np.int64)


def _b_line_columns(p: PhantomParams):
    """Boolean masks (core, zone) over columns plus distance-to-core per column."""
    x = np.arange(p.width)
    core = np.zeros(p.width, dtype=bool)
    for centre, width in p.b_lines:
        c = centre * (p.width - 1)
        lo = int(math.floor(c - (width - 1) / 2 + 0.5))
        core[max(lo, 0):min(lo + int(width), p.width)] = True
    if core.any():
        core_cols = np.flatnonzero(core)
        dist = np.abs(x[:, None] - core_cols[None, :]).min(axis=1)
    else:
        dist = np.full(p.width, np.iinfo(np.int64).max)
    zone = dist <= p.b_line_halo
    return core, zone, dist


def gen_phantom(params: PhantomParams, seed: int, noise_free: bool = False,
                diagnosis: Diagnosis = Diagnosis.NORMAL, group_id: str = "phantom",
                frame_index: int = 0, sample_id: str | None = None) -> Sample:
    """Render one phantom; identical arguments give a bit-identical sample."""
    params.validate()
    h, w = params.height, params.width
    top = pleura_top(params)
    bottom = top + params.pleura_thickness
    core, zone, dist = _b_line_columns(params)

    rows = np.arange(h)[:, None]
    labels = np.full((h, w), BACKGROUND, dtype=np.uint8)
    grey = np.zeros((h, w), dtype=np.float64)

    layering = TISSUE_LEVEL + 0.06 * np.cos(2 * np.pi * rows / max(4.0, top.mean() / 3))
    above = rows < top[None, :]
    grey = np.where(above, np.broadcast_to(layering, (h, w)), grey)

    pleura = (rows >= top[None, :]) & (rows < bottom[None, :])
    labels[pleura] = np.broadcast_to(np.where(zone, UNHEALTHY_PL, HEALTHY_PL), (h, w))[pleura]
    grey[pleura] = PLEURA_LEVEL

    below = rows >= bottom[None, :]
    healthy_cols = ~zone[None, :]
    labels[below & healthy_cols] = HEALTHY_REGION
    grey[below & healthy_cols] = HEALTHY_LEVEL
    for k in range(1, params.n_alines + 1):
        a_top = (k + 1) * top
        band = (rows >= a_top[None, :]) & (rows < (a_top + params.pleura_thickness)[None, :])
        band &= below & healthy_cols
        labels[band] = A_LINE
        grey[band] = A_LINE_LEVEL * A_LINE_DECAY ** (k - 1)

    halo = below & zone[None, :] & ~core[None, :]
    halo_level = UNHEALTHY_LEVEL + 0.25 * np.exp(-np.minimum(dist, 50) / 2.0)
    labels[halo] = UNHEALTHY_REGION
    grey[halo] = np.broadcast_to(halo_level[None, :], (h, w))[halo]
    streak = below & core[None, :]
    labels[streak] = B_LINE
    grey[streak] = B_LINE_LEVEL

    grey *= np.exp(-params.decay * rows)
    if not noise_free and params.speckle > 0:
        u = SplitMix64(seed).uniform((h, w))
        rayleigh = np.sqrt(-(4.0 / np.pi) * np.log1p(-u))
        grey *= np.maximum(1.0 + params.speckle * (rayleigh - 1.0), 0.0)
    grey = np.clip(grey, 0.0, 1.0).astype(np.float32)

    return Sample(grey=grey, labels=LabelMap(DENSE, labels), diagnosis=diagnosis,
                  group_id=group_id, frame_index=frame_index,
                  sample_id=sample_id or f"{group_id}_f{frame_index:03d}", seed=int(seed))


# -- datasets -------------------------------------------------------------------

_GROUP_PREFIX = {Diagnosis.NORMAL: "normal", Diagnosis.PNEUMONIA: "pneumonia",
                 Diagnosis.COVID19: "covid19"}


@dataclass(frozen=True)
class DatasetSpec:
    """How many synthetic patients/videos per diagnosis and frames per group.

    ``frames`` is an inclusive (min, max) range drawn per group, so groups
    can have unequal lengths like real videos.
    """
    groups: dict = field(default_factory=lambda: {"Normal": 1, "Pneumonia": 1, "COVID-19": 1})
    frames: tuple = (1, 1)
    height: int = 64
    width: int = 64
    noise_free: bool = False

    def group_counts(self) -> list[tuple[Diagnosis, int]]:
        counts = [(Diagnosis.parse(k), int(v)) for k, v in self.groups.items()]
        counts.sort(key=lambda dv: dv[0].index)
        if any(v < 0 for _, v in counts) or sum(v for _, v in counts) < 1:
            raise ValueError(f"need at least one group and no negative counts, got {self.groups}")
        lo, hi = self.frames
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid frames range {self.frames}")
        return counts


def _group_params(diag: Diagnosis, rng: SplitMix64, h: int, w: int) -> PhantomParams:
    scale = w / 64.0
    thick = max(2, round(h / 32))
    halo = max(1, round(2 * scale))
    b_lines = ()
    if diag is Diagnosis.NORMAL:
        n_alines = rng.integers(2, 5)
    elif diag is Diagnosis.PNEUMONIA:
        n_alines = rng.integers(1, 4)
        n_b = rng.integers(1, 3)
        b_lines = tuple((rng.uniform((), 0.1, 0.9), max(1, round(rng.integers(1, 3) * scale)))
                        for _ in range(n_b))
    else:
        n_alines = rng.integers(0, 3)
        n_b = rng.integers(3, 6)
        b_lines = tuple((rng.uniform((), 0.08, 0.92), max(2, round(rng.integers(2, 5) * scale)))
                        for _ in range(n_b))
        thick += rng.integers(1, 3)
    return PhantomParams(
        height=h, width=w,
        pleura_depth=rng.uniform((), 0.18, 0.27),
        pleura_thickness=int(thick),
        pleura_curvature=rng.uniform((), 0.0, 0.04 * h),
        n_alines=int(n_alines),
        b_lines=b_lines,
        b_line_halo=halo,
        speckle=rng.uniform((), 0.3, 0.6),
        decay=rng.uniform((), 0.3, 0.8) / h,
    )


def _frame_params(base: PhantomParams, rng: SplitMix64) -> PhantomParams:
    jitter = tuple((float(np.clip(c + rng.uniform((), -0.02, 0.02), 0.0, 1.0)), wd)
                   for c, wd in base.b_lines)
    return replace(base, b_lines=jitter,
                   pleura_depth=base.pleura_depth + rng.uniform((), -0.01, 0.01))


def gen_dataset(spec: DatasetSpec, seed: int) -> tuple[list[Sample], list[dict]]:
    """Generate groups of frames per diagnosis; returns samples and manifest records."""
    samples = []
    for diag, n_groups in spec.group_counts():
        for g in range(n_groups):
            group_id = f"{_GROUP_PREFIX[diag]}-{g:03d}"
            grng = SplitMix64(derive_seed(seed, group_id))
            base = _group_params(diag, grng, spec.height, spec.width)
            lo, hi = spec.frames
            n_frames = grng.integers(lo, hi + 1)
            for f in range(n_frames):
                fseed = derive_seed(seed, f"{group_id}/{f}")
                params = _frame_params(base, SplitMix64(fseed).child("geometry")) if f else base
                samples.append(gen_phantom(params, fseed, noise_free=spec.noise_free,
                                           diagnosis=diag, group_id=group_id, frame_index=f))
    return samples, [s.record() for s in samples]


PRESETS = {
    # small mixed set for smoke runs
    "demo": DatasetSpec(groups={"Normal": 2, "Pneumonia": 2, "COVID-19": 2}, frames=(2, 4)),
    # 4 patients x 38 frames = 152 images, 3 positive and 1 negative
    "semantic-lung": DatasetSpec(groups={"Normal": 1, "Pneumonia": 0, "COVID-19": 3},
                                 frames=(38, 38)),
    # balanced diagnostic set of short "videos" of unequal length
    "diagnostic": DatasetSpec(groups={"Normal": 30, "Pneumonia": 30, "COVID-19": 30},
                              frames=(1, 3)),
}
