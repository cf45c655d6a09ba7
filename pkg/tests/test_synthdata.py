import json
from dataclasses import replace

import numpy as np
import pytest

from ssdas import metrics, synthdata as sd, trainer
from ssdas.config import ExperimentConfig
from ssdas.nets import FormatError


@pytest.fixture(scope="module")
def small():
    return sd.generate_domain(sd.DomainSpec(seed=3), 50)


def test_deterministic(small):
    again = sd.generate_domain(sd.DomainSpec(seed=3), 50)
    assert again.images.tobytes() == small.images.tobytes()
    assert again.masks.tobytes() == small.masks.tobytes()


def test_all_classes_present(small):
    assert set(np.unique(small.masks)) == {0, 1, 2, 3}
    assert small.masks.max() < 4


def test_shape_counts_and_sizes(small):
    assert small.images.shape == (50, 32, 32, 3) and small.images.dtype == np.uint8
    for m in small.masks:
        assert 1 <= len(np.unique(m)) - 1 <= 3
        assert (m > 0).any()


def test_null_shift_reproduces_source():
    spec = sd.DomainSpec(seed=11)
    tgt = sd.shifted(spec, 0.0, seed=11)
    a, b = sd.generate_domain(spec, 5), sd.generate_domain(tgt, 5)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.masks, b.masks)


def test_shift_changes_appearance_only():
    spec = sd.DomainSpec(seed=11)
    tgt = sd.shifted(spec, 1.0, seed=11)
    a, b = sd.generate_domain(spec, 5), sd.generate_domain(tgt, 5)
    np.testing.assert_array_equal(a.masks, b.masks)
    assert not np.array_equal(a.images, b.images)
    assert tgt.appearance() != spec.appearance()


def test_layout_bands_order_classes_vertically(small):
    rows = [np.nonzero(small.masks == c)[1].mean() for c in (1, 2, 3)]
    assert rows == sorted(rows)
    free = sd.generate_domain(replace(sd.DomainSpec(seed=3), layout_bands=False), 50)
    assert set(np.unique(free.masks)) == {0, 1, 2, 3}


def test_impossible_placement_raises():
    spec = sd.DomainSpec(height=16, width=16, min_size=7, max_size=7, seed=0)
    with pytest.raises(sd.GenerationError):
        sd.render(spec, 0, retries=0)


def test_bad_spec_rejected():
    with pytest.raises(ValueError):
        sd.DomainSpec(num_classes=7)
    with pytest.raises(ValueError):
        sd.DomainSpec(height=10, width=10)


# --- splits ----------------------------------------------------------------------------
@pytest.fixture(scope="module")
def domains():
    return sd.generate_domain(sd.DomainSpec(seed=1), 20), sd.generate_domain(sd.DomainSpec(seed=2), 80)


def test_split_sizes(domains):
    s, t = domains
    one = sd.make_split(s, t, 1, seed=0, n_val=20)
    three = sd.make_split(s, t, 3, seed=0, n_val=20)
    assert one.k == 1 and three.k == 3 and len(set(three.labeled.tolist())) == 3


def test_split_partition(domains):
    s, t = domains
    sp = sd.make_split(s, t, 3, seed=4, n_val=20)
    parts = [set(sp.labeled.tolist()), set(sp.unlabeled.tolist()), set(sp.validation.tolist())]
    assert sum(map(len, parts)) == len(t)
    assert set().union(*parts) == set(range(len(t)))
    assert not parts[0] & parts[2]


def test_split_nested_and_fixed_validation(domains):
    s, t = domains
    small, big = sd.make_split(s, t, 1, 5, 20), sd.make_split(s, t, 10, 5, 20)
    np.testing.assert_array_equal(small.validation, big.validation)
    assert set(small.labeled.tolist()) <= set(big.labeled.tolist())


def test_split_k_too_large(domains):
    s, t = domains
    with pytest.raises(ValueError):
        sd.make_split(s, t, 61, 0, 20)


def test_unlabeled_arrays_carry_no_labels(domains):
    s, t = domains
    arrays = sd.make_split(s, t, 2, 0, 20).arrays()
    assert set(arrays) == {"xs", "ys", "xt", "yt", "xtu", "xval", "yval"}
    assert arrays["xtu"].shape[1:] == (3, 32, 32) and arrays["xs"].max() <= 1.0


# --- netpbm ------------------------------------------------------------------------------
def test_image_round_trip(tmp_path, small):
    p = sd.write_image(tmp_path / "a.ppm", small.images[0])
    np.testing.assert_array_equal(sd.read_image(p), small.images[0])
    q = sd.write_mask(tmp_path / "a.pgm", small.masks[0])
    back = sd.read_mask(q)
    np.testing.assert_array_equal(back, small.masks[0])
    assert back.max() < 4


def test_hand_built_ppm(tmp_path):
    p = tmp_path / "h.ppm"
    p.write_bytes(b"P6\n# comment\n2 2\n255\n" + bytes([255, 0, 0, 0, 255, 0, 0, 0, 255, 1, 2, 3]))
    img = sd.read_image(p)
    assert img.shape == (2, 2, 3)
    assert img[0, 0].tolist() == [255, 0, 0] and img[1, 1].tolist() == [1, 2, 3]


@pytest.mark.parametrize("raw,match", [
    (b"P5\n2 2\n255\n" + bytes(4), "byte 0"),
    (b"P6\n2 x\n255\n" + bytes(12), "byte"),
    (b"P6\n2 2\n255\n" + bytes(5), "truncated"),
    (b"P6\n2 2\n65535\n" + bytes(24), "maxval"),
])
def test_malformed_ppm(tmp_path, raw, match):
    p = tmp_path / "bad.ppm"
    p.write_bytes(raw)
    with pytest.raises(FormatError, match=match):
        sd.read_image(p)


def test_dataset_round_trip(tmp_path):
    split = sd.build_benchmark(shift=1.0, k=3, seed=2, n_source=6, n_unlabeled=5, n_val=4, max_k=3)
    root = sd.write_dataset(tmp_path / "d", split)
    doc = json.loads((root / "split.json").read_text())
    assert len(doc["labeled"]) == 3
    assert (root / "source" / "images" / "0000.ppm").exists()
    assert (root / "target" / "masks" / "0011.pgm").exists()
    back = sd.read_dataset(root)
    np.testing.assert_array_equal(back.target.images, split.target.images)
    np.testing.assert_array_equal(back.labeled, split.labeled)
    assert back.target.spec == split.target.spec


def test_read_missing_dataset(tmp_path):
    with pytest.raises(FileNotFoundError):
        sd.read_dataset(tmp_path / "nope")


def test_benchmark_defaults():
    split = sd.build_benchmark(k=1, seed=0)
    assert len(split.source) == 200 and split.validation.size == 50 and split.k == 1
    assert split.unlabeled.size >= 200


def test_shift_monotonically_hurts_source_model():
    """Sanity of the benchmark: a source-only model degrades as the shift grows."""
    shifts = (0.0, 0.5, 1.0, 1.5)
    scores = np.zeros((5, len(shifts)))
    for seed in range(5):
        split = sd.build_benchmark(shift=0.0, k=1, seed=seed, n_source=80, n_unlabeled=1, n_val=1, max_k=1)
        data = trainer.TrainData.from_split(split)
        cfg = ExperimentConfig(seed=seed, max_epoch=4, epochs_pre=0, base_lr=0.05, acda_image=False, pida_image=False,
                               acda_region=False, pida_region=False, n_source=80)
        model = trainer.train_s_plus_t(replace(cfg, eval_every=100), data).model
        for j, shift in enumerate(shifts):
            tgt = sd.generate_domain(sd.shifted(sd.DomainSpec(), shift, seed=1000 + seed), 30)
            preds = metrics.predict(model, sd.to_float(tgt.images))
            scores[seed, j] = metrics.miou(preds, tgt.masks, 4).miou
    mean = scores.mean(axis=0)
    assert all(a > b for a, b in zip(mean, mean[1:])), mean
