"""Two-stage inference: estimate CAR with the original model, then run that partition's teacher."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import models as M
from .car import PartitionSpec, car_histogram, compute_car, partition_of
from .data import BitemporalSample


@dataclass(frozen=True)
class RoutingRecord:
    id: str
    est_car: float
    gt_car: float
    chosen: str
    gt_partition: str


def estimate_car(m_o: M.ModelParams, sample: BitemporalSample, threshold: float = 0.5) -> float:
    """CAR of the original model's thresholded prediction."""
    cm = M.change_map(m_o, sample.image_a, sample.image_b)
    return compute_car(M.predict_mask(cm, threshold))


CarEstimator = Callable[[BitemporalSample], float]


def route_and_predict(m_o: M.ModelParams | None, teachers: dict, spec: PartitionSpec,
                      sample: BitemporalSample, threshold: float = 0.5,
                      estimator: CarEstimator | None = None) -> tuple[np.ndarray, RoutingRecord]:
    """Predicted mask from the teacher picked by the estimated CAR, plus the routing record.

    ``estimator`` replaces the original-model CAR estimate (e.g. with the
    ground-truth CAR for an oracle run).
    """
    missing = [lab for lab in spec.labels if lab not in teachers]
    if missing:
        raise KeyError(f"no teacher for partition(s) {missing}")
    if estimator is not None:
        est = float(estimator(sample))
    elif m_o is None:
        raise ValueError("route_and_predict needs the original model or an estimator")
    else:
        est = estimate_car(m_o, sample, threshold)
    chosen = partition_of(est, spec)
    cm = M.change_map(teachers[chosen], sample.image_a, sample.image_b)
    mask = M.predict_mask(cm, threshold)
    gt = compute_car(sample.label)
    return mask, RoutingRecord(sample.id, est, gt, chosen, partition_of(gt, spec))


def oracle_estimator(sample: BitemporalSample) -> float:
    return compute_car(sample.label)


def zero_estimator(sample: BitemporalSample) -> float:
    return 0.0


@dataclass
class RoutingConfusion:
    labels: tuple[str, ...]
    matrix: np.ndarray  # [gt partition, chosen partition]
    scatter: list[tuple[str, float, float]]  # (id, gt CAR, estimated CAR)

    @property
    def gt_counts(self) -> np.ndarray:
        return self.matrix.sum(axis=1)

    @property
    def routed_counts(self) -> np.ndarray:
        return self.matrix.sum(axis=0)

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.matrix)) / float(self.matrix.sum())


def routing_confusion(records: list[RoutingRecord], spec: PartitionSpec) -> RoutingConfusion:
    if not records:
        raise ValueError("routing_confusion needs at least one record")
    pos = {lab: i for i, lab in enumerate(spec.labels)}
    k = len(spec.labels)
    mat = np.zeros((k, k), dtype=np.int64)
    for r in records:
        mat[pos[r.gt_partition], pos[r.chosen]] += 1
    return RoutingConfusion(spec.labels, mat, [(r.id, r.gt_car, r.est_car) for r in records])


def write_routing_csv(records: list[RoutingRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "gt_car", "est_car", "gt_part", "chosen_part"])
        for r in records:
            w.writerow([r.id, repr(r.gt_car), repr(r.est_car), r.gt_partition, r.chosen])


def write_confusion_csv(conf: RoutingConfusion, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["gt_part \\ chosen_part", *conf.labels, "total"])
        for lab, row in zip(conf.labels, conf.matrix):
            w.writerow([lab, *map(int, row), int(row.sum())])
        w.writerow(["total", *map(int, conf.routed_counts), int(conf.matrix.sum())])


def write_car_distribution_csv(records: list[RoutingRecord], path, bins: int = 10) -> None:
    """Side-by-side GT and estimated CAR histograms."""
    edges, gt_counts = car_histogram([r.gt_car for r in records], bins)
    _, est_counts = car_histogram([r.est_car for r in records], bins)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin_lo", "bin_hi", "gt_count", "est_count"])
        for lo, hi, g, e in zip(edges[:-1], edges[1:], gt_counts, est_counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(g), int(e)])
