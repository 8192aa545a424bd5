"""Per-image two-class change-detection metrics, averaged over images.

Each image gets IoU / precision / recall / F-score for the unchanged (0) and
changed (1) classes, and their two-class means. Dataset scores are plain
means of the per-image values; pixel counts are never pooled across images.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .car import compute_car

CLASS_NAMES = ("unchanged", "changed")
METRICS = ("IoU", "Prec", "Rec", "Fscore")
MEAN_KEYS = ("mIoU", "mPrec", "mRec", "mFscore")
ROW_KEYS = tuple(f"{m}_{c}" for m in METRICS for c in (0, 1)) + MEAN_KEYS
ZERO_DIVISION_MODES = ("one", "skip-class")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(gt, pred) -> ConfusionCounts:
    gt = np.asarray(gt)
    pred = np.asarray(pred)
    if gt.shape != pred.shape:
        raise ValueError(f"gt shape {gt.shape} != pred shape {pred.shape}")
    if gt.size == 0:
        raise ValueError("cannot score an empty mask")
    g = gt.astype(bool)
    p = pred.astype(bool)
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    return ConfusionCounts(tp, fp, g.size - tp - fp - fn, fn)


def _ratio(num: int, den: int, empty: float) -> float:
    return num / den if den else empty


def image_metrics(counts: ConfusionCounts, zero_division: str = "one") -> dict[str, float]:
    """Per-class and mean metrics for one image.

    ``zero_division="one"``: any 0/0 ratio counts as 1; a class missing from
    both masks therefore scores 1 everywhere. An F-score whose precision and
    recall are both 0 is 0. ``"skip-class"``: 0/0 ratios count as 0 and a
    class missing from both masks is left out of the means.
    """
    if zero_division not in ZERO_DIVISION_MODES:
        raise ValueError(f"zero_division must be one of {ZERO_DIVISION_MODES}")
    empty = 1.0 if zero_division == "one" else 0.0
    tp, fp, tn, fn = counts.tp, counts.fp, counts.tn, counts.fn
    # class 0 is the positive class with the roles of the counts swapped
    per_class = []
    for pos, fpos, fneg in ((tn, fn, fp), (tp, fp, fn)):
        iou = _ratio(pos, pos + fpos + fneg, empty)
        prec = _ratio(pos, pos + fpos, empty)
        rec = _ratio(pos, pos + fneg, empty)
        f = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
        present = pos + fpos + fneg > 0
        per_class.append((iou, prec, rec, f, present))

    out: dict[str, float] = {}
    for c, (iou, prec, rec, f, _) in enumerate(per_class):
        out[f"IoU_{c}"], out[f"Prec_{c}"], out[f"Rec_{c}"], out[f"Fscore_{c}"] = iou, prec, rec, f
    keep = [c for c in (0, 1) if zero_division == "one" or per_class[c][4]]
    for k, metric in zip(MEAN_KEYS, METRICS):
        out[k] = sum(out[f"{metric}_{c}"] for c in keep) / len(keep)
    return out


@dataclass
class MetricsReport:
    rows: list[dict] = field(default_factory=list)
    aggregate: dict[str, float] = field(default_factory=dict)

    def per_class_table(self) -> dict[str, dict[str, float]]:
        """{class name: {IoU, Rec, Prec, Fscore}} of dataset means."""
        return {name: {m: self.aggregate[f"{m}_{c}"] for m in ("IoU", "Rec", "Prec", "Fscore")}
                for c, name in enumerate(CLASS_NAMES)}

    def summary(self) -> dict:
        return {
            "num_images": len(self.rows),
            "mean": {k: self.aggregate[k] for k in MEAN_KEYS},
            "per_class": self.per_class_table(),
        }


def dataset_metrics(rows, zero_division: str = "one") -> MetricsReport:
    """``rows`` is an iterable of (gt, pred, id) triples."""
    out = []
    for gt, pred, sid in rows:
        m = image_metrics(confusion(gt, pred), zero_division)
        out.append({"id": sid, "car": compute_car(gt), **m})
    if not out:
        raise ValueError("dataset_metrics needs at least one image")
    # fsum keeps the mean independent of row order
    agg = {k: math.fsum(r[k] for r in out) / len(out) for k in ROW_KEYS}
    return MetricsReport(out, agg)


def partition_report(rows: list[dict], k: int = 5) -> list[dict]:
    """Sort per-image rows by GT CAR (ties by id) and cut into ``k`` near-equal groups.

    Earlier groups take the remainder. Each output entry holds the group's
    CAR bounds, size and mean per-image mIoU.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(rows) < k:
        raise ValueError(f"need at least {k} rows for {k} partitions, got {len(rows)}")
    ordered = sorted(rows, key=lambda r: (r["car"], str(r["id"])))
    base, extra = divmod(len(ordered), k)
    out, start = [], 0
    for g in range(k):
        size = base + (1 if g < extra else 0)
        chunk = ordered[start:start + size]
        start += size
        out.append({
            "partition": g,
            "count": size,
            "car_min": chunk[0]["car"],
            "car_max": chunk[-1]["car"],
            "mIoU": math.fsum(r["mIoU"] for r in chunk) / size,
        })
    return out
