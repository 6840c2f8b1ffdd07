import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctxmod.errors import ConfigError, DataError
from ctxmod.synth import (SynthConfig, gabor_patch, generate_dataset, generate_neurons, load_dataset,
                          neuron_response, neuron_responses, neurons_from_dataset, preferred_stimulus,
                          procedural_images, rf_support_mask)

from conftest import FAST_SYNTH


@pytest.fixture(scope="module")
def neurons():
    return generate_neurons(6, FAST_SYNTH, seed=3)


def test_neurons_are_seeded():
    a = generate_neurons(3, FAST_SYNTH, seed=11)
    b = generate_neurons(3, FAST_SYNTH, seed=11)
    assert [n.to_dict() for n in a] == [n.to_dict() for n in b]
    with pytest.raises(ConfigError):
        generate_neurons(0, FAST_SYNTH)


def test_surround_fraction():
    pure = generate_neurons(4, SynthConfig(calibration_images=300, surround_fraction=0.0), seed=1)
    assert all(n.gain == 0.0 for n in pure)
    full = generate_neurons(4, SynthConfig(calibration_images=300, surround_fraction=1.0), seed=1)
    assert all(n.gain > 0 for n in full)
    with pytest.raises(ConfigError):
        generate_neurons(2, SynthConfig(surround_fraction=1.5))


def test_default_envelope_size():
    # quoted: mean receptive fields of about 0.75 deg at 15 px per degree, i.e. ~11 px
    cfg = SynthConfig(calibration_images=50)
    ns = generate_neurons(200, cfg, seed=0)
    diam = np.array([4 * n.sigma for n in ns])
    assert abs(diam.mean() - 0.75 * 15) < 0.75
    for n in ns[:20]:
        mask = rf_support_mask(n)
        rows, cols = np.nonzero(mask)
        assert rows.min() > 0 and cols.min() > 0 and rows.max() < 49 and cols.max() < 49


def test_blank_image_gives_offset(neurons):
    blank = np.full((1, 50, 50), 0.5)
    for n in neurons:
        assert neuron_response(n, blank) == pytest.approx(n.offset, abs=1e-12)


def test_preferred_stimulus_beats_probe_grid(neurons):
    for n in neurons:
        pref = neuron_response(n, preferred_stimulus(n))
        best = 0.0
        for ori in np.linspace(0, math.pi, 8, endpoint=False):
            for sf in np.linspace(0.05, 0.25, 5):
                for ph in np.linspace(0, 2 * math.pi, 4, endpoint=False):
                    patch = gabor_patch(50, n.center_row, n.center_col, ori, sf, ph, n.sigma, 0.5)
                    best = max(best, neuron_response(n, np.clip(0.5 + patch, 0, 1)[None]))
        assert pref >= best


def test_sparsity_on_fresh_images(neurons):
    imgs = procedural_images(99, 0, 5000)
    for n in neurons:
        r = neuron_responses(n, imgs)
        assert np.mean(r > 0.5) < 0.01  # half of the calibrated unit peak


def test_surround_only_matters_with_gain(neurons, rng):
    imgs = procedural_images(5, 0, 200)
    for n in neurons:
        outside = ~rf_support_mask(n)
        scrambled = imgs.copy()
        scrambled[:, 0][:, outside] = rng.random((200, int(outside.sum())))
        a, b = neuron_responses(n, imgs), neuron_responses(n, scrambled)
        if n.gain == 0.0:
            np.testing.assert_allclose(a, b, atol=1e-9)
        else:
            assert np.max(np.abs(a - b)) > 1e-3


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_responses_nonnegative_and_finite(seed):
    n = generate_neurons(1, SynthConfig(calibration_images=30), seed=seed % 1000)[0]
    x = np.random.default_rng(seed).random((4, 1, 50, 50))
    r = neuron_responses(n, x, rng=np.random.default_rng(seed))
    assert np.all(np.isfinite(r)) and np.all(r >= 0)


def test_dataset_round_trip(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    assert ds.images_train.shape == (240, 1, 50, 50) and ds.images_val.shape == (80, 1, 50, 50)
    assert ds.responses_train.shape == (240, 3) and ds.clean_val.shape == (80, 3)
    assert ds.images_train.min() >= 0 and ds.images_train.max() <= 1
    assert np.all(ds.responses_train >= 0)
    raw = np.fromfile(tiny_dataset / "images.f32", dtype="<f4").reshape(320, 1, 50, 50)
    np.testing.assert_array_equal(raw[:240], ds.images_train)
    meta = (tiny_dataset / "meta.txt").read_text()
    assert "format_version=1" in meta and "n_train=240" in meta
    assert json.loads((tiny_dataset / "manifest.json").read_text())["seed"] == 7
    assert len(neurons_from_dataset(ds)) == 3


def test_regeneration_gives_identical_checksums(tmp_path):
    metas = []
    for name in ("a", "b"):
        generate_dataset(30, 10, 2, seed=4, out=tmp_path / name, config=SynthConfig(calibration_images=100))
        metas.append((tmp_path / name / "meta.txt").read_text())
    assert metas[0] == metas[1]
    generate_dataset(30, 10, 2, seed=5, out=tmp_path / "c", config=SynthConfig(calibration_images=100))
    assert (tmp_path / "c" / "meta.txt").read_text() != metas[0]


def test_corruption_is_detected(tmp_path):
    out = tmp_path / "d"
    generate_dataset(20, 5, 1, seed=1, out=out, config=SynthConfig(calibration_images=50))
    raw = (out / "responses.f32").read_bytes()
    (out / "responses.f32").write_bytes(raw[:-8])
    with pytest.raises(DataError, match="checksum"):
        load_dataset(out)
    with pytest.raises(DataError, match="holds"):
        load_dataset(out, verify=False)
    meta = (out / "meta.txt").read_text().replace("format_version=1", "format_version=7")
    (out / "meta.txt").write_text(meta)
    with pytest.raises(DataError, match="version"):
        load_dataset(out)
    with pytest.raises(DataError):
        load_dataset(tmp_path / "missing")


def test_splits_and_subsets(tiny_dataset):
    ds = load_dataset(tiny_dataset)
    # images are seeded by global index, so the splits never share one
    flat_train = {ds.images_train[i].tobytes() for i in range(ds.n_train)}
    assert not any(ds.images_val[i].tobytes() in flat_train for i in range(ds.n_val))
    idx = ds.subset_indices(0.25, seed=1)
    assert idx.size == 60 and np.all(np.diff(idx) > 0)
    np.testing.assert_array_equal(idx, ds.subset_indices(0.25, seed=1))
    with pytest.raises(ConfigError):
        ds.subset_indices(0.0, seed=1)
    with pytest.raises(DataError):
        ds.targets(5)


def test_image_directory_source(tmp_path):
    from PIL import Image

    src = tmp_path / "imgs"
    src.mkdir()
    rng = np.random.default_rng(0)
    for i in range(6):
        Image.fromarray((rng.random((80, 100)) * 255).astype(np.uint8)).save(src / f"im{i}.png")
    ds = generate_dataset(4, 2, 1, seed=0, image_dir=src, config=SynthConfig(calibration_images=30))
    assert ds.images_train.shape == (4, 1, 50, 50)
    assert 0 <= ds.images_val.min() and ds.images_val.max() <= 1
    with pytest.raises(DataError):
        generate_dataset(5, 2, 1, seed=0, image_dir=src, config=SynthConfig(calibration_images=30))
