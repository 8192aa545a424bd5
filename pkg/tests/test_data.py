import numpy as np
import pytest
from hypothesis import given, strategies as st
from PIL import Image

from mtkd.car import compute_car
from mtkd.data import (CAR_TOLERANCE, AugmentConfig, BitemporalSample, Dataset, SyntheticSpec, augment,
                       generate_synthetic, load_dataset, save_dataset, split_dataset, synthetic_sample)


def _write_triple(root, split, sid, label, size=(4, 4), mode="L"):
    for sub in ("A", "B", "label"):
        (root / split / sub).mkdir(parents=True, exist_ok=True)
    img = np.zeros((*size, 3), dtype=np.uint8)
    Image.fromarray(img).save(root / split / "A" / f"{sid}.png")
    Image.fromarray(img + 10).save(root / split / "B" / f"{sid}.png")
    Image.fromarray(label, mode).save(root / split / "label" / f"{sid}.png")


# ---------------------------------------------------------------- loading


def test_load_two_triples_in_lexicographic_order(tmp_path):
    lab = np.zeros((4, 4), dtype=np.uint8)
    lab[0, 0] = 255
    _write_triple(tmp_path, "train", "b", lab)
    _write_triple(tmp_path, "train", "a", lab)
    ds = load_dataset(tmp_path, "train")
    assert ds.ids == ["a", "b"]
    assert ds[0].label[0, 0] == 1 and ds[0].label.sum() == 1
    assert ds[0].image_b[0, 0, 0] == pytest.approx(10 / 255)


def test_any_nonzero_label_value_is_change(tmp_path):
    lab = np.array([[0, 1], [7, 255]], dtype=np.uint8)
    _write_triple(tmp_path, "val", "x", lab, size=(2, 2))
    np.testing.assert_array_equal(load_dataset(tmp_path, "val")[0].label, [[0, 1], [1, 1]])


def test_rgb_label_is_accepted(tmp_path):
    lab = np.zeros((2, 2, 3), dtype=np.uint8)
    lab[1, 1, 2] = 200
    _write_triple(tmp_path, "test", "x", lab, size=(2, 2), mode="RGB")
    np.testing.assert_array_equal(load_dataset(tmp_path, "test")[0].label, [[0, 0], [0, 1]])


def test_empty_label_dir_fails(tmp_path):
    for sub in ("A", "B", "label"):
        (tmp_path / "train" / sub).mkdir(parents=True)
    with pytest.raises(FileNotFoundError, match="no label"):
        load_dataset(tmp_path, "train")


def test_missing_counterpart_names_the_id(tmp_path):
    _write_triple(tmp_path, "train", "s1", np.zeros((4, 4), np.uint8))
    (tmp_path / "train" / "B" / "s1.png").unlink()
    with pytest.raises(FileNotFoundError, match="s1"):
        load_dataset(tmp_path, "train")


def test_missing_directory_fails(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path, "train")


def test_size_mismatch_fails(tmp_path):
    _write_triple(tmp_path, "train", "s1", np.zeros((2, 2), np.uint8))  # images are 4x4
    with pytest.raises(ValueError, match="size mismatch"):
        load_dataset(tmp_path, "train")


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSpec(count=6, size=16), 3, "val")
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path, "val")
    assert back.ids == ds.ids
    for s, t in zip(ds, back):
        assert s.label.tobytes() == t.label.tobytes()
        np.testing.assert_array_equal(s.image_a, t.image_a)
        np.testing.assert_array_equal(s.image_b, t.image_b)


def test_sample_and_dataset_invariants():
    img = np.zeros((3, 4, 4), np.float32)
    with pytest.raises(ValueError):
        BitemporalSample("x", img, img, np.full((4, 4), 2, np.uint8))
    with pytest.raises(ValueError):
        BitemporalSample("x", img, img, np.zeros((3, 3), np.uint8))
    s = BitemporalSample("x", img, img, np.zeros((4, 4), np.uint8))
    with pytest.raises(ValueError, match="duplicate"):
        Dataset([s, s])


# ---------------------------------------------------------------- synthesis


def test_zero_car_target():
    s = synthetic_sample(SyntheticSpec(count=1, size=16, car_targets=((0.0, 1.0),), noise=0.0), 0, 0)
    assert not s.label.any()
    np.testing.assert_array_equal(s.image_a, s.image_b)
    noisy = synthetic_sample(SyntheticSpec(count=1, size=16, car_targets=((0.0, 1.0),)), 0, 0)
    assert not noisy.label.any()
    assert np.abs(noisy.image_a - noisy.image_b).mean() < 0.1


def test_full_car_target():
    s = synthetic_sample(SyntheticSpec(count=1, size=16, car_targets=((1.0, 1.0),)), 0, 0)
    assert s.label.all()


@given(st.floats(0.0, 1.0), st.sampled_from([8, 16, 32]), st.integers(0, 1000))
def test_achieved_car_within_tolerance(target, size, seed):
    spec = SyntheticSpec(count=1, size=size, car_targets=((target, 1.0),))
    npix = size * size
    k = round(target * npix)
    if target > 0 and (k == 0 or abs(k - target * npix) > CAR_TOLERANCE * target * npix):
        with pytest.raises(ValueError, match="unreachable"):
            synthetic_sample(spec, seed, 0)
        return
    s = synthetic_sample(spec, seed, 0)
    car = compute_car(s.label)
    if target == 0:
        assert car == 0
    else:
        assert abs(car - target) <= CAR_TOLERANCE * target
    assert 0 <= s.image_a.min() and s.image_b.max() <= 1


def test_label_is_exactly_the_altered_region():
    s = synthetic_sample(SyntheticSpec(count=1, size=32, car_targets=((0.3, 1.0),), noise=0.0), 1, 0)
    changed = np.abs(s.image_a - s.image_b).max(axis=0) > 0
    # recoloured pixels can coincide with the background colour by chance, but never outside the label
    assert not (changed & (s.label == 0)).any()
    assert (changed & (s.label == 1)).sum() >= 0.95 * s.label.sum()


def test_uniform_cars_cover_deciles():
    ds = generate_synthetic(SyntheticSpec(count=100, size=32, car_range=(0.0, 0.6)), 0)
    cars = np.array([s.car for s in ds])
    deciles = set(np.minimum((cars * 10).astype(int), 9))
    assert len(deciles & set(range(6))) >= 5
    assert cars.max() <= 0.6


def test_generation_is_deterministic_and_split_specific():
    spec = SyntheticSpec(count=4, size=16)
    a, b = generate_synthetic(spec, 5, "train"), generate_synthetic(spec, 5, "train")
    for s, t in zip(a, b):
        assert s.image_a.tobytes() == t.image_a.tobytes() and s.label.tobytes() == t.label.tobytes()
    v = generate_synthetic(spec, 5, "val")
    assert set(v.ids).isdisjoint(a.ids)
    assert a[0].image_a.tobytes() != v[0].image_a.tobytes()


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(size=10)
    with pytest.raises(ValueError):
        SyntheticSpec(car_targets=((1.5, 1.0),))
    with pytest.raises(ValueError):
        SyntheticSpec(car_targets=((0.5, 0.0),))


# ---------------------------------------------------------------- augmentation


@pytest.fixture(scope="module")
def sample():
    return synthetic_sample(SyntheticSpec(count=1, size=16, car_targets=((0.3, 1.0),)), 2, 0)


def test_disabled_augmentation_is_identity(sample):
    out = augment(sample, AugmentConfig.disabled(), np.random.default_rng(0))
    for f in ("image_a", "image_b", "label"):
        assert getattr(out, f).tobytes() == getattr(sample, f).tobytes()


def _seed_with_rotation(k):
    for seed in range(100):
        r = np.random.default_rng(seed)
        r.random(5)
        if int(r.integers(0, 4)) == k:
            return seed
    raise AssertionError("no seed found")


def test_double_180_rotation_is_identity(sample):
    cfg = AugmentConfig(1.0, 0.0, 0.0, 0.0, 0.125, 0.0, (0.75, 1.25))
    seed = _seed_with_rotation(2)
    once = augment(sample, cfg, np.random.default_rng(seed))
    np.testing.assert_array_equal(once.label, sample.label[::-1, ::-1])
    twice = augment(once, cfg, np.random.default_rng(seed))
    for f in ("image_a", "image_b", "label"):
        assert getattr(twice, f).tobytes() == getattr(sample, f).tobytes()


def test_geometric_augmentation_preserves_car_and_binarity(sample):
    rng = np.random.default_rng(0)
    geo = AugmentConfig(brightness_prob=0.0, contrast_prob=0.0)
    for _ in range(100):
        out = augment(sample, geo, rng)
        assert compute_car(out.label) == compute_car(sample.label)
        assert out.label.sum() == sample.label.sum()


def test_full_augmentation_ranges_and_label_untouched_by_photometric(sample):
    rng = np.random.default_rng(1)
    photo = AugmentConfig(0.0, 0.0, 0.0, 1.0, 0.125, 1.0, (0.75, 1.25))
    for _ in range(50):
        out = augment(sample, AugmentConfig(), rng)
        assert np.isin(out.label, (0, 1)).all()
        assert out.image_a.min() >= 0 and out.image_b.max() <= 1
        p = augment(sample, photo, rng)
        assert p.label.tobytes() == sample.label.tobytes()


def test_photometric_is_identical_on_both_images():
    img = np.full((3, 4, 4), 0.5, np.float32)
    s = BitemporalSample("x", img, img.copy(), np.zeros((4, 4), np.uint8))
    out = augment(s, AugmentConfig(0, 0, 0, 1.0, 0.125, 1.0, (0.75, 1.25)), np.random.default_rng(3))
    assert out.image_a.tobytes() == out.image_b.tobytes()
    assert not np.array_equal(out.image_a, img)


# ---------------------------------------------------------------- splits


def _ds(n):
    return generate_synthetic(SyntheticSpec(count=n, size=8, car_range=(0, 0.5)), 0)


def test_split_examples():
    tr, va, te = split_dataset(_ds(10), (0.8, 0.1, 0.1), seed=0)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)
    tr, va, te = split_dataset(_ds(5), (1, 0, 0))
    assert (len(tr), len(va), len(te)) == (5, 0, 0)
    with pytest.raises(ValueError):
        split_dataset(_ds(5), (0.5, 0.2, 0.2))


@given(st.integers(0, 40), st.integers(0, 100))
def test_split_is_a_deterministic_partition(n, seed):
    ds = _ds(n) if n else Dataset([])
    parts = split_dataset(ds, (0.7, 0.2, 0.1), seed)
    again = split_dataset(ds, (0.7, 0.2, 0.1), seed)
    ids = [p.ids for p in parts]
    assert ids == [p.ids for p in again]
    flat = sum(ids, [])
    assert sorted(flat) == sorted(ds.ids) and len(flat) == len(set(flat))
