import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revtransfer import autodiff as ad
from revtransfer.rng import SplitMix64
from revtransfer.unet import (MAGIC, CheckpointError, ClassifierConfig, ModelWeights, UNetConfig,
                              attach_cls_head, build_unet, cls_forward, head_probs, load_weights,
                              param_nodes, save_weights, seg_forward)

SMALL = UNetConfig(depth=2, base_channels=4, n_seg_classes=4)


def closed_form_count(depth, base, classes):
    conv = lambda cin, cout, k: cout * cin * k * k + cout
    ch = [base * 2 ** i for i in range(depth + 1)]
    total, prev = 0, 1
    for i in range(depth):
        total += conv(prev, ch[i], 3) + conv(ch[i], ch[i], 3)
        prev = ch[i]
    total += conv(ch[-2], ch[-1], 3) + conv(ch[-1], ch[-1], 3)
    for i in range(depth):
        total += ch[i + 1] * ch[i] * 4 + ch[i]                     # up-conv
        total += conv(2 * ch[i], ch[i], 3) + conv(ch[i], ch[i], 3)
    return total + conv(base, classes, 1)


def test_parameter_count_hand_value():
    assert build_unet(SMALL, 0).n_parameters() == 7412 == closed_form_count(2, 4, 4)


@pytest.mark.parametrize("depth,base,classes", [(2, 2, 4), (3, 8, 7), (4, 3, 5)])
def test_parameter_count_closed_form(depth, base, classes):
    w = build_unet(UNetConfig(depth=depth, base_channels=base, n_seg_classes=classes), 1)
    assert w.n_parameters() == closed_form_count(depth, base, classes)


def test_build_is_deterministic():
    assert build_unet(SMALL, 3).same_as(build_unet(SMALL, 3))
    assert not build_unet(SMALL, 3).same_as(build_unet(SMALL, 4))


@pytest.mark.parametrize("cfg", [UNetConfig(depth=1), UNetConfig(in_channels=3),
                                 UNetConfig(n_seg_classes=1), UNetConfig(base_channels=0)])
def test_invalid_config(cfg):
    with pytest.raises(ValueError):
        build_unet(cfg, 0)


@pytest.mark.parametrize("hw", [(4, 4), (8, 12), (16, 8)])
def test_seg_forward_shape(hw):
    w = build_unet(SMALL, 0)
    x = SplitMix64(1).uniform((2, 1) + hw).astype(np.float32)
    out = seg_forward(w, x)
    assert out.shape == (2, 4) + hw


def test_seg_forward_requires_divisible_dims():
    with pytest.raises(ad.ShapeError, match="divisible by 4"):
        seg_forward(build_unet(SMALL, 0), np.zeros((1, 1, 6, 8), np.float32))


def test_zero_final_layer_gives_uniform_softmax():
    w = build_unet(SMALL, 0)
    w.params["out.weight"][:] = 0
    probs = ad.softmax_channels(seg_forward(w, SplitMix64(2).uniform((1, 1, 8, 8)))).value
    assert np.all(probs == 0.25)


def test_seg_forward_deterministic():
    w = build_unet(SMALL, 0)
    x = SplitMix64(5).uniform((3, 1, 8, 8)).astype(np.float32)
    assert np.array_equal(seg_forward(w, x).value, seg_forward(w, x).value)


@pytest.mark.parametrize("classes", [7, 4])
def test_attach_head_width_and_preserves_seg_weights(classes):
    w = build_unet(UNetConfig(depth=2, base_channels=2, n_seg_classes=classes), 0)
    before = {k: v.copy() for k, v in w.params.items()}
    wc = attach_cls_head(w, ClassifierConfig(n_seg_classes=classes), 0)
    assert wc.params["head.fc.weight"].shape == (3, classes)
    for k, v in before.items():
        assert np.array_equal(wc.params[k], v) and np.array_equal(w.params[k], v)
    assert w.head is None


def test_attach_head_twice_fails():
    wc = attach_cls_head(build_unet(SMALL, 0), ClassifierConfig(4), 0)
    with pytest.raises(ValueError, match="already"):
        attach_cls_head(wc, ClassifierConfig(4), 0)
    with pytest.raises(ValueError):
        attach_cls_head(build_unet(SMALL, 0), ClassifierConfig(7), 0)


def test_cls_forward_needs_head():
    with pytest.raises(ValueError, match="head"):
        cls_forward(build_unet(SMALL, 0), np.zeros((1, 1, 8, 8), np.float32))


def test_cls_forward_zero_head_is_uniform():
    wc = attach_cls_head(build_unet(SMALL, 0), ClassifierConfig(4), 0)
    wc.params["head.fc.weight"][:] = 0
    probs = cls_forward(wc, SplitMix64(0).uniform((2, 1, 8, 8))).value
    np.testing.assert_allclose(probs, 1 / 3, rtol=1e-6)


def test_cls_forward_batch_order_invariance():
    wc = attach_cls_head(build_unet(SMALL, 0), ClassifierConfig(4), 1)
    x = SplitMix64(9).uniform((4, 1, 8, 8)).astype(np.float32)
    a = cls_forward(wc, x).value
    b = cls_forward(wc, x[::-1]).value[::-1]
    np.testing.assert_allclose(a, b, rtol=1e-6)
    np.testing.assert_allclose(a.sum(axis=1), 1, atol=1e-6)


def test_head_on_one_hot_segmentation():
    seg = np.zeros((4, 4), dtype=int)
    seg[:, 2] = 1
    seg[:, 3] = 2       # areas: class0 8/16, class1 4/16, class2 4/16
    logits = np.moveaxis(np.eye(7)[seg], -1, 0)[None] * 200.0
    weight = np.zeros((3, 7))
    weight[0, 0] = weight[1, 1] = weight[2, 2] = 1
    with ad.precision(np.float64):
        nodes = {"head.fc.weight": ad.constant(weight), "head.fc.bias": ad.constant(np.zeros(3))}
        probs = head_probs(nodes, ad.constant(logits)).value[0]
    z = [math.exp(0.5), math.exp(0.25), math.exp(0.25)]
    np.testing.assert_allclose(probs, [v / sum(z) for v in z], rtol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    w = attach_cls_head(build_unet(SMALL, 2), ClassifierConfig(4), 2)
    save_weights(w, tmp_path / "a.rtw")
    loaded = load_weights(tmp_path / "a.rtw")
    assert loaded.same_as(w)
    save_weights(loaded, tmp_path / "b.rtw")
    assert (tmp_path / "a.rtw").read_bytes() == (tmp_path / "b.rtw").read_bytes()


def test_checkpoint_truncated(tmp_path):
    save_weights(build_unet(SMALL, 0), tmp_path / "a.rtw")
    data = (tmp_path / "a.rtw").read_bytes()
    for cut in (4, 20, len(data) - 3):
        (tmp_path / "t.rtw").write_bytes(data[:cut])
        with pytest.raises(CheckpointError, match="unexpected EOF"):
            load_weights(tmp_path / "t.rtw")


def test_checkpoint_bad_magic_and_version(tmp_path):
    save_weights(build_unet(SMALL, 0), tmp_path / "a.rtw")
    data = bytearray((tmp_path / "a.rtw").read_bytes())
    bad = bytes(b"X" + data[1:])
    (tmp_path / "m.rtw").write_bytes(bad)
    with pytest.raises(CheckpointError, match="magic"):
        load_weights(tmp_path / "m.rtw")
    data[len(MAGIC):len(MAGIC) + 4] = struct.pack("<I", 99)
    (tmp_path / "v.rtw").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        load_weights(tmp_path / "v.rtw")


def test_checkpoint_shape_tampering(tmp_path):
    save_weights(build_unet(SMALL, 0), tmp_path / "a.rtw")
    data = (tmp_path / "a.rtw").read_bytes()
    hlen = struct.unpack_from("<I", data, len(MAGIC) + 4)[0]
    start = len(MAGIC) + 8
    header = json.loads(data[start:start + hlen])
    header["params"][2]["shape"] = [4, 4, 3, 2]
    raw = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = data[:len(MAGIC) + 4] + struct.pack("<I", len(raw)) + raw + data[start + hlen:]
    (tmp_path / "s.rtw").write_bytes(out)
    with pytest.raises(CheckpointError, match="enc0.conv2.weight"):
        load_weights(tmp_path / "s.rtw")


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32))
def test_cls_rows_sum_to_one_random_weights(seed):
    rng = SplitMix64(seed)
    wc = attach_cls_head(build_unet(UNetConfig(depth=2, base_channels=2, n_seg_classes=7), seed),
                         ClassifierConfig(7), seed)
    wc.params["head.fc.weight"] = rng.uniform((3, 7), -20, 20).astype(np.float32)
    probs = cls_forward(wc, rng.uniform((3, 1, 4, 4)).astype(np.float32)).value
    np.testing.assert_allclose(probs.sum(axis=1), 1, atol=1e-6)
