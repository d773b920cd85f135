"""U-Net for per-pixel logits and its conversion into a diagnosis classifier.

Topology for ``depth`` D and ``base_channels`` B (ch_i = B * 2**i):

    enc{i}:      conv3x3(ch_{i-1} -> ch_i) relu conv3x3(ch_i -> ch_i) relu, maxpool   i < D
    bottleneck:  conv3x3(ch_{D-1} -> ch_D) relu conv3x3(ch_D -> ch_D) relu
    dec{i}:      up2x2(ch_{i+1} -> ch_i), concat skip, conv3x3(2 ch_i -> ch_i) relu,
                 conv3x3(ch_i -> ch_i) relu                                      i = D-1..0
    out:         conv1x1(B -> n_seg_classes)

The classifier head is softmax over classes -> channel-wise global average
pooling -> fully connected (n_diag x n_seg) -> softmax.

Weights use fan-in scaled uniform init from the SplitMix64 stream: bound
sqrt(6 / fan_in) for layers feeding a ReLU, sqrt(3 / fan_in) otherwise;
biases start at zero. Parameters are drawn in definition order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .rng import SplitMix64, derive_seed

FORMAT_VERSION = 1
MAGIC = b"RTUNETW\x00"


@dataclass(frozen=True)
class UNetConfig:
    in_channels: int = 1
    depth: int = 3
    base_channels: int = 8
    n_seg_classes: int = 7

    def validate(self) -> None:
        if self.in_channels != 1:
            raise ValueError(f"in_channels must be 1 (grey input), got {self.in_channels}")
        if self.depth < 2:
            raise ValueError(f"depth must be >= 2, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.n_seg_classes < 2:
            raise ValueError(f"n_seg_classes must be >= 2, got {self.n_seg_classes}")

    @property
    def divisor(self) -> int:
        return 2 ** self.depth


@dataclass(frozen=True)
class ClassifierConfig:
    n_seg_classes: int = 7
    n_diag_classes: int = 3


@dataclass(eq=False)
class ModelWeights:
    config: UNetConfig
    params: dict = field(default_factory=dict)   # name -> float32 array, architecture order
    head: ClassifierConfig | None = None
    version: int = FORMAT_VERSION

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.config, {k: v.copy() for k, v in self.params.items()},
                            self.head, self.version)

    def seg_param_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def same_as(self, other: "ModelWeights") -> bool:
        return (self.config == other.config and self.head == other.head
                and list(self.params) == list(other.params)
                and all(self.params[k].dtype == other.params[k].dtype
                        and np.array_equal(self.params[k], other.params[k]) for k in self.params))


def _layer_specs(cfg: UNetConfig):
    """(name, kind, cin, cout) in architecture order; kind is conv3, up or conv1."""
    ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
    specs = []
    prev = cfg.in_channels
    for i in range(cfg.depth):
        specs += [(f"enc{i}.conv1", "conv3", prev, ch[i]), (f"enc{i}.conv2", "conv3", ch[i], ch[i])]
        prev = ch[i]
    specs += [("bottleneck.conv1", "conv3", prev, ch[-1]),
              ("bottleneck.conv2", "conv3", ch[-1], ch[-1])]
    for i in reversed(range(cfg.depth)):
        specs += [(f"dec{i}.up", "up", ch[i + 1], ch[i]),
                  (f"dec{i}.conv1", "conv3", 2 * ch[i], ch[i]),
                  (f"dec{i}.conv2", "conv3", ch[i], ch[i])]
    specs.append(("out", "conv1", ch[0], cfg.n_seg_classes))
    return specs


def param_shapes(cfg: UNetConfig, head: ClassifierConfig | None = None) -> dict[str, tuple]:
    shapes = {}
    for name, kind, cin, cout in _layer_specs(cfg):
        if kind == "up":
            shapes[f"{name}.weight"] = (cin, cout, 2, 2)
        else:
            k = 3 if kind == "conv3" else 1
            shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)
    if head is not None:
        shapes["head.fc.weight"] = (head.n_diag_classes, head.n_seg_classes)
        shapes["head.fc.bias"] = (head.n_diag_classes,)
    return shapes


def _uniform(rng: SplitMix64, shape, bound) -> np.ndarray:
    return rng.uniform(shape, -bound, bound).astype(np.float32)


def build_unet(cfg: UNetConfig, seed: int) -> ModelWeights:
    cfg.validate()
    rng = SplitMix64(derive_seed(seed, "unet-init"))
    params = {}
    for name, kind, cin, cout in _layer_specs(cfg):
        if kind == "up":
            shape, fan_in, gain = (cin, cout, 2, 2), cin, 3.0
        else:
            k = 3 if kind == "conv3" else 1
            shape, fan_in = (cout, cin, k, k), cin * k * k
            gain = 6.0 if kind == "conv3" else 3.0
        params[f"{name}.weight"] = _uniform(rng, shape, np.sqrt(gain / fan_in))
        params[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)
    return ModelWeights(cfg, params)


def attach_cls_head(w: ModelWeights, cc: ClassifierConfig, seed: int) -> ModelWeights:
    """New weights with a diagnosis head; segmentation arrays are shared, not modified."""
    if w.head is not None:
        raise ValueError("model already has a classification head")
    if cc.n_seg_classes != w.config.n_seg_classes:
        raise ValueError(f"head expects {cc.n_seg_classes} segmentation classes but the U-Net "
                         f"produces {w.config.n_seg_classes}")
    rng = SplitMix64(derive_seed(seed, "head-init"))
    params = dict(w.params)
    params["head.fc.weight"] = _uniform(rng, (cc.n_diag_classes, cc.n_seg_classes),
                                        np.sqrt(3.0 / cc.n_seg_classes))
    params["head.fc.bias"] = np.zeros(cc.n_diag_classes, dtype=np.float32)
    return ModelWeights(w.config, params, cc, w.version)


# -- forward passes ----------------------------------------------------------------

def param_nodes(w: ModelWeights, names=None) -> dict[str, ad.Node]:
    """Trainable leaf nodes for ``names`` (all by default); others become constants."""
    names = set(w.params) if names is None else set(names)
    return {k: ad.param(v, name=k, dtype=v.dtype) if k in names else ad.constant(v, dtype=v.dtype)
            for k, v in w.params.items()}


def _check_batch(cfg: UNetConfig, batch) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 4 or batch.shape[1] != cfg.in_channels:
        raise ad.ShapeError(f"expected batch N×{cfg.in_channels}×H×W, got {batch.shape}")
    h, w = batch.shape[2:]
    if h % cfg.divisor or w % cfg.divisor:
        raise ad.ShapeError(f"H and W must be divisible by {cfg.divisor} (2**depth), got {h}x{w}")
    return batch


def unet_logits(nodes: dict, cfg: UNetConfig, x: ad.Node) -> ad.Node:
    def block(prefix, h):
        h = ad.relu(ad.conv2d(h, nodes[f"{prefix}.conv1.weight"], nodes[f"{prefix}.conv1.bias"], 1))
        return ad.relu(ad.conv2d(h, nodes[f"{prefix}.conv2.weight"], nodes[f"{prefix}.conv2.bias"], 1))

    skips = []
    h = x
    for i in range(cfg.depth):
        h = block(f"enc{i}", h)
        skips.append(h)
        h = ad.maxpool2d(h)
    h = block("bottleneck", h)
    for i in reversed(range(cfg.depth)):
        h = ad.transposed_conv2d(h, nodes[f"dec{i}.up.weight"], nodes[f"dec{i}.up.bias"])
        h = block(f"dec{i}", ad.concat_channels([h, skips[i]]))
    return ad.conv2d(h, nodes["out.weight"], nodes["out.bias"], 0)


def head_probs(nodes: dict, seg_logits: ad.Node) -> ad.Node:
    pooled = ad.global_avg_pool_channels(ad.softmax_channels(seg_logits))
    return ad.softmax_channels(ad.fully_connected(pooled, nodes["head.fc.weight"],
                                                  nodes["head.fc.bias"]))


def seg_forward(w: ModelWeights, batch) -> ad.Node:
    batch = _check_batch(w.config, batch)
    nodes = param_nodes(w, names=())
    return unet_logits(nodes, w.config, ad.constant(batch, dtype=np.float32))


def cls_forward(w: ModelWeights, batch) -> ad.Node:
    if w.head is None:
        raise ValueError("model has no classification head; call attach_cls_head first")
    batch = _check_batch(w.config, batch)
    nodes = param_nodes(w, names=())
    return head_probs(nodes, unet_logits(nodes, w.config, ad.constant(batch, dtype=np.float32)))


def predict_labels(w: ModelWeights, batch) -> np.ndarray:
    """Argmax class per pixel, N×H×W uint8."""
    return seg_forward(w, batch).value.argmax(axis=1).astype(np.uint8)


# -- checkpoints -------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def _header(w: ModelWeights) -> bytes:
    header = {
        "format_version": w.version,
        "unet": asdict(w.config),
        "head": None if w.head is None else asdict(w.head),
        "params": [{"name": k, "shape": list(v.shape)} for k, v in w.params.items()],
    }
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_weights(w: ModelWeights, path) -> None:
    """Layout: magic, u32 version, u32 header length, JSON header, little-endian f32 data."""
    head = _header(w)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(head)))
        fh.write(head)
        for v in w.params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 8:
        raise CheckpointError(f"{path}: unexpected EOF in file preamble")
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {data[:len(MAGIC)]!r}")
    version, hlen = struct.unpack_from("<II", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    pos = len(MAGIC) + 8
    if len(data) < pos + hlen:
        raise CheckpointError(f"{path}: unexpected EOF in header")
    try:
        header = json.loads(data[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    pos += hlen
    cfg = UNetConfig(**header["unet"])
    head = None if header["head"] is None else ClassifierConfig(**header["head"])
    expected = param_shapes(cfg, head)
    listed = [(p["name"], tuple(p["shape"])) for p in header["params"]]
    if [n for n, _ in listed] != list(expected):
        raise CheckpointError(f"{path}: parameter names do not match the architecture in the header")
    params = {}
    for name, shape in listed:
        if shape != expected[name]:
            raise CheckpointError(
                f"{path}: shape mismatch for parameter {name!r}: header {shape}, "
                f"architecture {expected[name]}")
        n = int(np.prod(shape)) * 4
        if len(data) < pos + n:
            raise CheckpointError(f"{path}: unexpected EOF while reading parameter {name!r}")
        params[name] = np.frombuffer(data, dtype="<f4", count=n // 4, offset=pos) \
            .astype(np.float32).reshape(shape)
        pos += n
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes after parameter data")
    return ModelWeights(cfg, params, head, version)
