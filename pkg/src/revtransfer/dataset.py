"""Sample records and the JSON-lines manifest that indexes PGM files on disk."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from . import pnm
from .labels import DENSE, LabelMap, LabelSchema, get_schema, resize_grey, resize_labels


class Diagnosis(enum.Enum):
    NORMAL = "Normal"
    PNEUMONIA = "Pneumonia"
    COVID19 = "COVID-19"

    @property
    def index(self) -> int:
        return _DIAG_ORDER.index(self)

    @classmethod
    def from_index(cls, i: int) -> "Diagnosis":
        return _DIAG_ORDER[i]

    @classmethod
    def parse(cls, text: str) -> "Diagnosis":
        for d in cls:
            if text in (d.value, d.name):
                return d
        raise ValueError(f"unknown diagnosis {text!r}")


_DIAG_ORDER = (Diagnosis.NORMAL, Diagnosis.PNEUMONIA, Diagnosis.COVID19)
DIAGNOSES = _DIAG_ORDER


@dataclass(frozen=True, eq=False)
class Sample:
    grey: np.ndarray          # H×W float32 in [0, 1]
    labels: LabelMap
    diagnosis: Diagnosis
    group_id: str
    frame_index: int = 0
    sample_id: str = ""
    seed: int = 0
    augment: str = "none"

    def __post_init__(self):
        if not self.group_id:
            raise ValueError("group_id must be non-empty")
        if self.grey.shape != self.labels.shape:
            raise ValueError(f"grey {self.grey.shape} and labels {self.labels.shape} differ in size")

    def with_(self, **changes) -> "Sample":
        return replace(self, **changes)

    def same_as(self, other: "Sample") -> bool:
        """Bit-exact equality of pixels and metadata."""
        return (self.grey.dtype == other.grey.dtype
                and np.array_equal(self.grey, other.grey)
                and self.labels == other.labels
                and self.record() == other.record())

    def record(self) -> dict:
        return {
            "id": self.sample_id,
            "diagnosis": self.diagnosis.value,
            "group_id": self.group_id,
            "frame_index": self.frame_index,
            "seed": self.seed,
            "augment": self.augment,
        }


MANIFEST_NAME = "manifest.jsonl"


def write_dataset(samples, out_dir) -> str:
    """Write paired grey/label PGMs plus ``manifest.jsonl``; returns the manifest path.

    Label PGMs store 1-based class indices.
    """
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "labels"), exist_ok=True)
    lines = []
    for s in samples:
        grey_rel = f"images/{s.sample_id}.pgm"
        label_rel = f"labels/{s.sample_id}.pgm"
        pnm.write_grey(os.path.join(out_dir, grey_rel), s.grey)
        pnm.write_pgm(os.path.join(out_dir, label_rel), s.labels.pixels + 1)
        rec = s.record()
        rec.update(grey_path=grey_rel, label_path=label_rel, schema=s.labels.schema.name)
        lines.append(json.dumps(rec, sort_keys=True))
    path = os.path.join(out_dir, MANIFEST_NAME)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def load_dataset(manifest_path, size: tuple[int, int] | None = None,
                 schema: LabelSchema | None = None) -> list[Sample]:
    """Load every manifest entry; ``size`` resizes at load time (bilinear grey, nearest labels)."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    samples = []
    for rec in read_manifest(manifest_path):
        grey = pnm.read_grey(os.path.join(root, rec["grey_path"]))
        raw = pnm.read_pgm(os.path.join(root, rec["label_path"])).astype(np.int64) - 1
        sch = schema or get_schema(rec.get("schema", DENSE.name))
        if raw.min() < 0:
            raise ValueError(f"{rec['label_path']}: label value 0 is not a valid 1-based class")
        labels = LabelMap(sch, raw.astype(np.uint8))
        if size is not None and tuple(size) != grey.shape:
            grey = resize_grey(grey, size)
            labels = resize_labels(labels, size)
        samples.append(Sample(
            grey=grey, labels=labels, diagnosis=Diagnosis.parse(rec["diagnosis"]),
            group_id=rec["group_id"], frame_index=int(rec["frame_index"]),
            sample_id=rec["id"], seed=int(rec["seed"]), augment=rec.get("augment", "none"),
        ))
    return samples
