"""Per-layer gradient checks used by the test suite and the ``gradcheck`` CLI.

Each case wraps one layer in a scalar loss, either ``sum(layer(x) * R)`` with a
fixed random projection ``R`` or a cross-entropy, and is compared against
central differences in float64.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .rng import SplitMix64, derive_seed


def _project(y: ad.Node, tag: str) -> ad.Node:
    r = SplitMix64(derive_seed(0x5EED, tag)).uniform(y.shape, -1.0, 1.0)
    return ad.sum_all(ad.mul(y, ad.constant(r)))


def _labels(shape, n_classes, tag):
    size = int(np.prod(shape))
    return SplitMix64(derive_seed(0x1AB, tag)).integers(0, n_classes, size).reshape(shape)


# name -> (builder, input shapes)
CASES = {
    "conv2d": (lambda n: _project(ad.conv2d(n["x"], n["k"], n["b"], padding=1), "conv2d"),
               {"x": (2, 2, 5, 4), "k": (3, 2, 3, 3), "b": (3,)}),
    "transposed_conv2d": (lambda n: _project(ad.transposed_conv2d(n["x"], n["k"], n["b"]), "tconv"),
                          {"x": (2, 3, 3, 2), "k": (3, 2, 2, 2), "b": (2,)}),
    "maxpool2d": (lambda n: _project(ad.maxpool2d(n["x"]), "maxpool"), {"x": (2, 2, 4, 6)}),
    "relu": (lambda n: _project(ad.relu(n["x"]), "relu"), {"x": (3, 2, 3, 3)}),
    "softmax_ce": (lambda n: ad.cross_entropy_pixelwise(ad.softmax_channels(n["x"]),
                                                        _labels((2, 3, 3), 4, "ce")),
                   {"x": (2, 4, 3, 3)}),
    "global_avg_pool": (lambda n: _project(ad.global_avg_pool_channels(n["x"]), "gap"),
                        {"x": (2, 3, 4, 5)}),
    "fully_connected": (lambda n: _project(ad.fully_connected(n["x"], n["w"], n["b"]), "fc"),
                        {"x": (4, 7), "w": (3, 7), "b": (3,)}),
    "concat_add": (lambda n: _project(ad.add(ad.concat_channels([n["a"], n["b"]]), n["c"]), "cat"),
                   {"a": (1, 2, 2, 2), "b": (1, 1, 2, 2), "c": (1, 3, 2, 2)}),
}


@dataclass(frozen=True)
class GradCheckResult:
    layer: str
    max_rel_error: float
    seeds: int
    seconds: float


def run_gradchecks(seeds=range(10), layers=None) -> list[GradCheckResult]:
    """Worst relative error per layer over ``seeds``."""
    cases = CASES
    names = list(cases) if layers is None else list(layers)
    unknown = [n for n in names if n not in cases]
    if unknown:
        raise ValueError(f"unknown layer(s) {unknown}; choose from {sorted(cases)}")
    out = []
    for name in names:
        builder, shapes = cases[name]
        t0 = time.perf_counter()
        worst = max(ad.grad_check(builder, shapes, seed=s) for s in seeds)
        out.append(GradCheckResult(name, worst, len(list(seeds)), time.perf_counter() - t0))
    return out
