import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revtransfer import labels as L
from revtransfer.augment import expand_sixfold, flip_lr, intensity_scale
from revtransfer.phantom import DatasetSpec, PhantomParams, gen_dataset, gen_phantom


@pytest.fixture(scope="module")
def sample():
    return gen_phantom(PhantomParams(b_lines=((0.25, 3),)), seed=3)


def test_flip_involution(sample):
    assert flip_lr(flip_lr(sample)).same_as(sample)


def test_flip_symmetric_sample_unchanged():
    s = gen_phantom(PhantomParams(width=33, b_lines=((0.5, 3),), speckle=0.0), seed=0)
    assert flip_lr(s).same_as(s)


def test_flip_moves_b_line(sample):
    def centre(s):
        cols = np.flatnonzero((s.labels.pixels == L.B_LINE).any(axis=0))
        return cols.mean() / (s.grey.shape[1] - 1)
    assert centre(sample) == pytest.approx(0.25, abs=0.02)
    assert centre(flip_lr(sample)) == pytest.approx(0.75, abs=0.02)
    assert flip_lr(sample).group_id == sample.group_id


def test_scale_identity(sample):
    assert intensity_scale(sample, 1.0).same_as(sample)


def test_scale_down_max():
    s = gen_phantom(PhantomParams(), 0)
    s = s.with_(grey=np.where(s.grey == s.grey.max(), 1.0, s.grey).astype(np.float32))
    assert intensity_scale(s, 0.8).grey.max() == np.float32(0.8)


def test_scale_up_clamps(sample):
    s = sample.with_(grey=np.full_like(sample.grey, 0.95))
    assert np.all(intensity_scale(s, 1.1).grey == 1.0)


@pytest.mark.parametrize("factor", [0.79, 1.11, 2.0])
def test_scale_out_of_range(sample, factor):
    with pytest.raises(ValueError):
        intensity_scale(sample, factor)


def test_expand_one_sample(sample):
    out = expand_sixfold([sample])
    assert len(out) == 6
    assert sum(v.augment.startswith("flip") for v in out) == 3
    assert {v.group_id for v in out} == {sample.group_id}
    assert len({v.augment for v in out}) == 6
    assert len({v.sample_id for v in out}) == 6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32), st.floats(0.8, 1.1))
def test_labels_and_histograms_preserved(seed, factor):
    s = gen_phantom(PhantomParams(b_lines=((0.6, 2),)), seed)
    scaled = intensity_scale(s, factor)
    assert scaled.labels == s.labels
    for v in expand_sixfold([s]):
        assert np.array_equal(v.labels.histogram(), s.labels.histogram())


def test_expand_sizes():
    samples, _ = gen_dataset(DatasetSpec(groups={"Normal": 2, "COVID-19": 1}, frames=(2, 3),
                                         height=16, width=16), 1)
    assert len(expand_sixfold(samples)) == 6 * len(samples)
