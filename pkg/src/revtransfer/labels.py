"""Dense and sparse lung label schemas, remapping, resizing and colour rendering.

Class indices are stored 0-based in memory. Anything a user sees (label PGM
files, reports) uses 1-based numbering: dense 1..7, sparse 1..4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SCAN_SIZE = (624, 464)    # H, W of full-resolution scans
DESK_SIZE = (128, 96)


@dataclass(frozen=True)
class LabelSchema:
    name: str
    classes: tuple[str, ...]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def index(self, class_name: str) -> int:
        return self.classes.index(class_name)

    def numbered(self) -> list[tuple[int, str]]:
        return [(i + 1, c) for i, c in enumerate(self.classes)]


DENSE = LabelSchema("dense", (
    "A-line", "B-line", "healthy pleural line", "unhealthy pleural line",
    "healthy region", "unhealthy region", "background",
))
SPARSE = LabelSchema("sparse", ("A-line", "B-line", "pleural line", "background"))
SCHEMAS = {"dense": DENSE, "sparse": SPARSE}

A_LINE, B_LINE, HEALTHY_PL, UNHEALTHY_PL, HEALTHY_REGION, UNHEALTHY_REGION, BACKGROUND = range(7)
S_A_LINE, S_B_LINE, S_PLEURAL, S_BACKGROUND = range(4)

# dense index -> sparse index
DENSE_TO_SPARSE = np.array(
    [S_A_LINE, S_B_LINE, S_PLEURAL, S_PLEURAL, S_BACKGROUND, S_BACKGROUND, S_BACKGROUND],
    dtype=np.uint8,
)


class SchemaError(ValueError):
    pass


def get_schema(name: str) -> LabelSchema:
    try:
        return SCHEMAS[name]
    except KeyError:
        raise SchemaError(f"unknown label schema {name!r}; expected one of {sorted(SCHEMAS)}") from None


@dataclass(frozen=True, eq=False)
class LabelMap:
    schema: LabelSchema
    pixels: np.ndarray  # H×W uint8, 0-based class indices

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ValueError(f"label map must be 2-d, got shape {px.shape}")
        if px.size and int(px.max()) >= self.schema.n_classes:
            raise SchemaError(
                f"label index {int(px.max())} invalid for {self.schema.name} schema "
                f"({self.schema.n_classes} classes)")
        object.__setattr__(self, "pixels", px.astype(np.uint8, copy=False))

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape

    def __eq__(self, other):
        return (isinstance(other, LabelMap) and self.schema == other.schema
                and np.array_equal(self.pixels, other.pixels))

    def histogram(self) -> np.ndarray:
        return np.bincount(self.pixels.ravel(), minlength=self.schema.n_classes)


def remap_dense_to_sparse(label_map: LabelMap) -> LabelMap:
    """Merge healthy/unhealthy pleura into one pleural class and both regions into background."""
    if label_map.schema != DENSE:
        raise SchemaError(f"remap expects a dense label map, got {label_map.schema.name}")
    return LabelMap(SPARSE, DENSE_TO_SPARSE[label_map.pixels])


def _check_target(target):
    h, w = target
    if h < 2 or w < 2:
        raise ValueError(f"resize target must be at least 2x2, got {h}x{w}")


def resize_grey(img: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with corner-aligned sampling.

    Output pixel (i, j) samples the source at
    ``(i * (H_in - 1) / (H_out - 1), j * (W_in - 1) / (W_out - 1))``.
    """
    _check_target(target)
    img = np.asarray(img, dtype=np.float32)
    if img.shape == tuple(target):
        return img.copy()
    (hi, wi), (ho, wo) = img.shape, target

    def axis(n_in, n_out):
        pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_in > 1 else np.zeros(n_out)
        lo = np.minimum(np.floor(pos).astype(np.intp), n_in - 1)
        hi_ = np.minimum(lo + 1, n_in - 1)
        return lo, hi_, pos - lo

    r0, r1, fr = axis(hi, ho)
    c0, c1, fc = axis(wi, wo)
    src = img.astype(np.float64)
    top = src[r0][:, c0] * (1 - fc) + src[r0][:, c1] * fc
    bot = src[r1][:, c0] * (1 - fc) + src[r1][:, c1] * fc
    out = top * (1 - fr)[:, None] + bot * fr[:, None]
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_labels(label_map: LabelMap, target: tuple[int, int]) -> LabelMap:
    """Nearest-neighbour resize: output (i, j) copies source floor((i + 0.5) * H_in / H_out)."""
    _check_target(target)
    (hi, wi), (ho, wo) = label_map.shape, target
    rows = np.minimum(((np.arange(ho) + 0.5) * hi / ho).astype(np.intp), hi - 1)
    cols = np.minimum(((np.arange(wo) + 0.5) * wi / wo).astype(np.intp), wi - 1)
    return LabelMap(label_map.schema, label_map.pixels[rows][:, cols])


# Figure legend colours, taken from the LaTeX dvipsnames CMYK definitions
# (rgb = 255 * (1 - c|m|y) with k = 0, Gray uses k = 0.5). Palette version 1.
PALETTE_VERSION = 1
LEGEND_RGB = {
    "Apricot": (255, 173, 122),
    "Yellow": (255, 255, 0),
    "Gray": (128, 128, 128),
    "NavyBlue": (15, 117, 255),
    "Green": (0, 255, 0),
    "Orange": (255, 99, 33),
    "Aquamarine": (46, 255, 178),
    "CarnationPink": (255, 94, 255),
}
_LEGEND_FOR = {
    "dense": ("Yellow", "Gray", "Green", "Orange", "Aquamarine", "CarnationPink", "Apricot"),
    "sparse": ("Yellow", "Gray", "NavyBlue", "Apricot"),
}


def palette(schema: LabelSchema) -> np.ndarray:
    return np.array([LEGEND_RGB[c] for c in _LEGEND_FOR[schema.name]], dtype=np.uint8)


def colorize(label_map: LabelMap) -> np.ndarray:
    """H×W×3 uint8 rendering with the figure legend colours."""
    return palette(label_map.schema)[label_map.pixels]


def decolorize(rgb: np.ndarray, schema: LabelSchema) -> LabelMap:
    pal = palette(schema).astype(np.int64)
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected H×W×3 image, got {rgb.shape}")
    key = (rgb[..., 0].astype(np.int64) << 16) | (rgb[..., 1].astype(np.int64) << 8) | rgb[..., 2]
    pal_key = (pal[:, 0] << 16) | (pal[:, 1] << 8) | pal[:, 2]
    order = np.argsort(pal_key)
    pos = np.searchsorted(pal_key[order], key)
    pos = np.minimum(pos, len(pal_key) - 1)
    if not np.all(pal_key[order][pos] == key):
        raise ValueError(f"image contains colours outside the {schema.name} palette")
    return LabelMap(schema, order[pos])
