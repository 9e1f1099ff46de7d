import numpy as np

from vesca.data import SynthParams, load_dataset, patch_labels, save_dataset, synth_dataset
from vesca.encoder import Encoder, EncoderSpec, init_params
from vesca.numerics import ParameterError, RngState, rbf_mmd2

import pytest

SMALL = SynthParams(num_source=24, num_target_train=8, num_target_test=8)


def test_same_seed_same_dataset():
    a = synth_dataset(SMALL, RngState(1))
    b = synth_dataset(SMALL, RngState(1))
    for name in ("source", "source_labels", "target_train", "target_test_labels"):
        assert getattr(a, name).tobytes() == getattr(b, name).tobytes()
    c = synth_dataset(SMALL, RngState(2))
    assert not np.array_equal(a.source, c.source)


def test_shapes_and_ranges():
    ds = synth_dataset(SMALL, RngState(0))
    assert ds.source.shape == (24, 32, 32, 3)
    assert ds.target_test_labels.shape == (8, (32 // 4) ** 2)
    assert ds.source.min() >= 0 and ds.source.max() <= 1
    assert ds.target_test.min() >= 0 and ds.target_test.max() <= 1
    assert set(np.unique(ds.source_labels)) <= {0, 1}
    assert ds.source_labels.mean() > 0.05  # shapes are present


def test_patch_labels():
    mask = np.zeros((8, 8))
    mask[:4, :4] = 1
    mask[4:6, 4:8] = 1
    assert patch_labels(mask, 4, 0.5).tolist() == [1, 0, 0, 1]
    assert patch_labels(mask, 4, 0.6).tolist() == [1, 0, 0, 0]


def test_params_validation():
    with pytest.raises(ParameterError):
        SynthParams(image_side=30)
    with pytest.raises(ParameterError):
        SynthParams(num_source=1)


def test_domain_shift_visible_in_embeddings():
    ds = synth_dataset(SynthParams(num_source=60, num_target_train=2, num_target_test=30),
                       RngState(0))
    spec = EncoderSpec(pooling="mean")
    enc = Encoder(spec, init_params(spec, RngState(5)))
    src = enc.embed(ds.source)
    tgt = enc.embed(ds.target_test)
    between = rbf_mmd2(src[:30], tgt)
    within = rbf_mmd2(src[:30], src[30:])
    assert between > within
    assert between > 0


def test_save_and_load(tmp_path):
    ds = synth_dataset(SMALL, RngState(0))
    written = save_dataset(ds, tmp_path / "d", previews=2)
    assert (tmp_path / "d" / "preview_01.ppm").is_file()
    assert all(p.is_file() for p in written)
    back = load_dataset(tmp_path / "d")
    assert back.params == ds.params
    for name in ("source", "target_train", "target_test"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes()
        assert np.array_equal(getattr(back, name + "_labels"), getattr(ds, name + "_labels"))
