import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from mtkd.car import PartitionSpec, car_histogram, compute_car, partition_dataset, partition_of
from mtkd.data import BitemporalSample, Dataset, SyntheticSpec, generate_synthetic
from oracles import car_loop, partition_loop

SPEC = PartitionSpec((0.05, 0.2))


def _sample(sid, label):
    label = np.asarray(label, dtype=np.uint8)
    img = np.zeros((3, *label.shape), np.float32)
    return BitemporalSample(sid, img, img, label)


def test_compute_car_examples():
    assert compute_car(np.zeros((4, 4))) == 0.0
    assert compute_car(np.ones((4, 4))) == 1.0
    m = np.zeros((4, 4))
    m.flat[[0, 5, 9]] = 1
    assert compute_car(m) == 0.1875
    with pytest.raises(ValueError):
        compute_car(np.zeros((0, 4)))


@given(arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1)))
def test_compute_car_matches_pixel_loop(mask):
    assert compute_car(mask) == car_loop(mask)


def test_partition_boundaries_are_closed_on_the_right():
    assert partition_of(0.05, SPEC) == "small"
    assert partition_of(0.0500001, SPEC) == "medium"
    assert partition_of(0.2, SPEC) == "medium"
    assert partition_of(0.2000001, SPEC) == "large"
    assert partition_of(0.0, SPEC) == "small"
    assert partition_of(0.0, PartitionSpec((0.1,))) == "small"
    assert partition_of(1.0, SPEC) == "large"


@given(st.floats(0, 1), st.floats(0, 1))
def test_partition_is_monotone(a, b):
    lo, hi = min(a, b), max(a, b)
    assert SPEC.index_of(lo) <= SPEC.index_of(hi)


@given(st.floats(0, 1))
def test_partition_matches_reference_chain(car):
    assert partition_of(car, SPEC) == partition_loop(car, SPEC.thresholds, SPEC.labels)


def test_spec_validation_and_default_labels():
    assert PartitionSpec((0.1,)).labels == ("small", "large")
    assert SPEC.labels == ("small", "medium", "large")
    assert PartitionSpec((0.1, 0.2, 0.3)).labels == ("p0", "p1", "p2", "p3")
    for bad in [(0.2, 0.05), (0.1, 0.1), (0.0, 0.5), (0.5, 1.0), ()]:
        with pytest.raises(ValueError):
            PartitionSpec(bad)
    with pytest.raises(ValueError):
        PartitionSpec((0.1,), ("a", "a"))
    with pytest.raises(ValueError):
        PartitionSpec((0.1,), ("a", "b", "c"))


def _car_sample(sid, car, size=10):
    lab = np.zeros(size * size, np.uint8)
    lab[:round(car * size * size)] = 1
    return _sample(sid, lab.reshape(size, size))


def test_partition_dataset_examples():
    ds = Dataset([_car_sample("a", 0.01), _car_sample("b", 0.1), _car_sample("c", 0.5)])
    parts = partition_dataset(ds, SPEC)
    assert {k: v.ids for k, v in parts.items()} == {"small": ["a"], "medium": ["b"], "large": ["c"]}
    zeros = Dataset([_car_sample(str(i), 0.0) for i in range(4)])
    parts = partition_dataset(zeros, SPEC)
    assert len(parts["small"]) == 4 and len(parts["medium"]) == 0 and len(parts["large"]) == 0
    assert list(partition_dataset(ds, PartitionSpec((0.10,)))) == ["small", "large"]


def test_partition_dataset_is_a_disjoint_cover():
    ds = generate_synthetic(SyntheticSpec(count=40, size=16), 1)
    parts = partition_dataset(ds, SPEC)
    ids = sum((p.ids for p in parts.values()), [])
    assert sorted(ids) == sorted(ds.ids) and len(ids) == len(set(ids))
    for lab, sub in parts.items():
        assert sub.ids == [i for i in ds.ids if i in set(sub.ids)]  # order preserved
        assert all(partition_of(s.car, SPEC) == lab for s in sub)


def test_histogram_examples():
    ds = Dataset([_car_sample(str(i), 0.0) for i in range(5)])
    edges, counts = car_histogram(ds, 10)
    assert counts[0] == 5 and counts.sum() == 5
    np.testing.assert_allclose(edges, np.linspace(0, 1, 11))
    _, counts = car_histogram([0.0, 1.0], 2)
    assert counts.tolist() == [1, 1]
    with pytest.raises(ValueError):
        car_histogram([0.5], 0)


def test_histogram_of_uniform_synthetic_cars():
    ds = generate_synthetic(SyntheticSpec(count=100, size=32, car_range=(0.0, 0.6)), 0)
    _, counts = car_histogram(ds, 10)
    assert counts[7:].sum() == 0 and counts.sum() == 100


@given(st.lists(st.floats(0, 1), max_size=50), st.integers(1, 20))
def test_histogram_counts_sum_to_size(cars, bins):
    assert car_histogram(cars, bins)[1].sum() == len(cars)
