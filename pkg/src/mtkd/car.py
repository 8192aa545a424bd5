"""Change Area Ratio (CAR): the changed-pixel fraction of a label, and partitioning by it."""

from __future__ import annotations

import bisect
from dataclasses import dataclass

import numpy as np

DEFAULT_LABELS = {1: ("small", "large"), 2: ("small", "medium", "large")}


@dataclass(frozen=True)
class PartitionSpec:
    """Ordered CAR thresholds; intervals are closed on the right.

    With thresholds (t1, t2): car <= t1 -> labels[0], t1 < car <= t2 ->
    labels[1], car > t2 -> labels[2].
    """

    thresholds: tuple[float, ...] = (0.05, 0.2)
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        th = tuple(float(t) for t in self.thresholds)
        if not th:
            raise ValueError("a partition spec needs at least one threshold")
        if any(not 0 < t < 1 for t in th):
            raise ValueError(f"thresholds must lie in (0, 1), got {th}")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise ValueError(f"thresholds must be strictly increasing, got {th}")
        labels = tuple(self.labels) or DEFAULT_LABELS.get(
            len(th), tuple(f"p{i}" for i in range(len(th) + 1)))
        if len(labels) != len(th) + 1:
            raise ValueError(f"{len(th)} thresholds need {len(th) + 1} labels, got {labels}")
        if len(set(labels)) != len(labels):
            raise ValueError(f"partition labels must be unique, got {labels}")
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "labels", labels)

    def index_of(self, car: float) -> int:
        # bisect_left puts car == threshold into the lower interval
        return bisect.bisect_left(self.thresholds, car)


def compute_car(mask) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("cannot compute CAR of an empty mask")
    return float(np.count_nonzero(mask)) / mask.size


def partition_of(car: float, spec: PartitionSpec) -> str:
    return spec.labels[spec.index_of(car)]


def partition_dataset(dataset, spec: PartitionSpec) -> dict:
    """Split by ground-truth CAR; every label of ``spec`` gets a (possibly empty) subset."""
    from .data import Dataset

    groups: dict[str, list] = {lab: [] for lab in spec.labels}
    for sample in dataset:
        groups[partition_of(compute_car(sample.label), spec)].append(sample)
    return {lab: Dataset(items, dataset.split) for lab, items in groups.items()}


def car_histogram(cars, bin_count: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Equal-width bins over [0, 1], last bin closed on the right.

    ``cars`` is a sequence of CAR values or a Dataset.
    """
    if bin_count < 1:
        raise ValueError(f"bin_count must be >= 1, got {bin_count}")
    if hasattr(cars, "samples"):
        cars = [compute_car(s.label) for s in cars]
    counts, edges = np.histogram(np.asarray(cars, dtype=np.float64), bins=bin_count, range=(0.0, 1.0))
    return edges, counts
