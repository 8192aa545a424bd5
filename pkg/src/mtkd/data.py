"""Bitemporal samples: on-disk datasets, synthetic generation, augmentation, splits.

On disk a dataset lives at ``root/<split>/{A,B,label}/<id>.png`` with 8-bit
RGB images and 8-bit single-channel labels (any nonzero pixel = changed).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .car import compute_car
from .rng import rng_for

SPLITS = ("train", "val", "test")


@dataclass
class BitemporalSample:
    id: str
    image_a: np.ndarray  # [3,H,W] float32 in [0,1]
    image_b: np.ndarray
    label: np.ndarray  # [H,W] uint8 in {0,1}
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.image_a.shape != self.image_b.shape or self.image_a.ndim != 3 or self.image_a.shape[0] != 3:
            raise ValueError(f"{self.id}: images must both be [3,H,W], got "
                             f"{self.image_a.shape} and {self.image_b.shape}")
        if self.label.shape != self.image_a.shape[1:]:
            raise ValueError(f"{self.id}: label shape {self.label.shape} does not match "
                             f"image size {self.image_a.shape[1:]}")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError(f"{self.id}: label must be binary")

    @property
    def car(self) -> float:
        return compute_car(self.label)


@dataclass
class Dataset:
    samples: list[BitemporalSample]
    split: str = "train"

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValueError(f"duplicate sample ids in split {self.split!r}")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[BitemporalSample]:
        return iter(self.samples)

    def __getitem__(self, i: int) -> BitemporalSample:
        return self.samples[i]

    @property
    def ids(self) -> list[str]:
        return [s.id for s in self.samples]

    def subset(self, ids: Sequence[str]) -> "Dataset":
        keep = set(ids)
        return Dataset([s for s in self.samples if s.id in keep], self.split)


# ---------------------------------------------------------------- disk I/O


def _read_rgb(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return (arr.transpose(2, 0, 1).astype(np.float32) / 255.0)


def _read_label(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr.max(axis=2)
    return (arr != 0).astype(np.uint8)


def load_dataset(root, split: str) -> Dataset:
    base = Path(root) / split
    dirs = {k: base / k for k in ("A", "B", "label")}
    for k, d in dirs.items():
        if not d.is_dir():
            raise FileNotFoundError(f"missing directory {d}")
    label_files = sorted(p for p in dirs["label"].iterdir() if p.suffix.lower() == ".png")
    if not label_files:
        raise FileNotFoundError(f"no label files in {dirs['label']}")
    a_ids = {p.stem for p in dirs["A"].glob("*.png")}
    b_ids = {p.stem for p in dirs["B"].glob("*.png")}
    l_ids = {p.stem for p in label_files}
    for sid in sorted(a_ids | b_ids | l_ids):
        for k, have in (("A", a_ids), ("B", b_ids), ("label", l_ids)):
            if sid not in have:
                raise FileNotFoundError(f"sample {sid!r}: missing {k}/{sid}.png")

    samples = []
    for lf in label_files:
        sid = lf.stem
        a = _read_rgb(dirs["A"] / f"{sid}.png")
        b = _read_rgb(dirs["B"] / f"{sid}.png")
        y = _read_label(lf)
        if a.shape != b.shape or a.shape[1:] != y.shape:
            raise ValueError(f"sample {sid!r}: size mismatch A{a.shape[1:]} B{b.shape[1:]} label{y.shape}")
        samples.append(BitemporalSample(sid, a, b, y))
    return Dataset(samples, split)


def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def save_dataset(dataset: Dataset, root, split: str | None = None) -> Path:
    base = Path(root) / (split or dataset.split)
    for k in ("A", "B", "label"):
        (base / k).mkdir(parents=True, exist_ok=True)
    for s in dataset:
        Image.fromarray(_to_u8(s.image_a).transpose(1, 2, 0), "RGB").save(base / "A" / f"{s.id}.png")
        Image.fromarray(_to_u8(s.image_b).transpose(1, 2, 0), "RGB").save(base / "B" / f"{s.id}.png")
        Image.fromarray((s.label * 255).astype(np.uint8), "L").save(base / "label" / f"{s.id}.png")
    return base


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    count: int = 100
    size: int = 32
    car_range: tuple[float, float] | None = (0.0, 0.6)
    car_targets: tuple[tuple[float, float], ...] = ()  # (car, weight) pairs; overrides car_range
    noise: float = 0.02
    shapes: tuple[str, ...] = ("rectangle", "ellipse")

    def __post_init__(self):
        if self.count < 0:
            raise ValueError("count must be >= 0")
        if self.size < 4 or self.size % 4:
            raise ValueError(f"size must be a positive multiple of 4, got {self.size}")
        if self.car_targets:
            for car, w in self.car_targets:
                if not 0 <= car <= 1 or w <= 0:
                    raise ValueError(f"bad CAR target ({car}, {w})")
        elif self.car_range is None or not 0 <= self.car_range[0] <= self.car_range[1] <= 1:
            raise ValueError(f"car_range must satisfy 0 <= lo <= hi <= 1, got {self.car_range}")
        if not set(self.shapes) <= {"rectangle", "ellipse"} or not self.shapes:
            raise ValueError(f"unknown shapes {self.shapes}")


CAR_TOLERANCE = 0.2


def _target_pixels(car: float, npix: int) -> int:
    k = int(round(car * npix))
    if car == 0:
        return 0
    if not (1 - CAR_TOLERANCE) * car * npix <= k <= (1 + CAR_TOLERANCE) * car * npix or k == 0:
        raise ValueError(f"CAR target {car} is unreachable on a {npix}-pixel image "
                         f"within +/-{CAR_TOLERANCE:.0%}")
    return k


def _background(rng: np.random.Generator, size: int, noise: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.empty((3, size, size))
    for c in range(3):
        base = rng.uniform(0.3, 0.55)
        wave = sum(rng.uniform(0.02, 0.07) * np.sin(2 * np.pi * (rng.uniform(0.5, 3) * xx * np.cos(t)
                                                                  + rng.uniform(0.5, 3) * yy * np.sin(t))
                                                     + rng.uniform(0, 2 * np.pi))
                   for t in rng.uniform(0, np.pi, size=3))
        img[c] = base + wave
    return np.clip(img + rng.normal(0, noise, img.shape), 0, 1)


def _shape_mask(rng: np.random.Generator, size: int, kind: str, area: float) -> np.ndarray:
    aspect = rng.uniform(0.5, 2.0)
    h = max(1, min(size, int(round(math.sqrt(area / aspect)))))
    w = max(1, min(size, int(round(area / h))))
    if kind == "ellipse":
        # an ellipse fills pi/4 of its box
        h = max(1, min(size, int(round(h * 1.13))))
        w = max(1, min(size, int(round(w * 1.13))))
    top = int(rng.integers(0, size - h + 1))
    left = int(rng.integers(0, size - w + 1))
    m = np.zeros((size, size), dtype=bool)
    if kind == "rectangle":
        m[top:top + h, left:left + w] = True
    else:
        yy, xx = np.mgrid[0:h, 0:w]
        cy, cx = (h - 1) / 2, (w - 1) / 2
        inside = ((yy - cy) / (h / 2)) ** 2 + ((xx - cx) / (w / 2)) ** 2 <= 1
        m[top:top + h, left:left + w] = inside
    return m


def _grow(rng: np.random.Generator, mask: np.ndarray, k: int) -> np.ndarray:
    """Add 4-connected boundary pixels at random until ``mask`` has ``k`` pixels."""
    mask = mask.copy()
    while mask.sum() < k:
        need = k - int(mask.sum())
        if not mask.any():
            mask.flat[int(rng.integers(mask.size))] = True
            continue
        front = np.zeros_like(mask)
        front[1:] |= mask[:-1]
        front[:-1] |= mask[1:]
        front[:, 1:] |= mask[:, :-1]
        front[:, :-1] |= mask[:, 1:]
        cand = np.flatnonzero(front & ~mask)
        if cand.size == 0:  # mask components cannot grow; seed elsewhere
            cand = np.flatnonzero(~mask)
        take = rng.choice(cand, size=min(need, cand.size), replace=False)
        mask.flat[take] = True
    return mask


def _change_label(rng: np.random.Generator, spec: SyntheticSpec, k: int) -> list[np.ndarray]:
    """Shapes whose union has exactly ``k`` pixels (last shape may be grown)."""
    size = spec.size
    union = np.zeros((size, size), dtype=bool)
    shapes: list[np.ndarray] = []
    for _ in range(64):
        have = int(union.sum())
        if have >= 0.9 * k:
            break
        area = rng.uniform(0.3, 1.0) * (k - have)
        m = _shape_mask(rng, size, str(rng.choice(spec.shapes)), max(area, 1.0))
        if int((union | m).sum()) > k:
            continue
        union |= m
        shapes.append(m)
    if int(union.sum()) < k:
        grown = _grow(rng, union, k)
        shapes.append(grown & ~union)
    return shapes


def _draw_targets(rng: np.random.Generator, spec: SyntheticSpec) -> float:
    npix = spec.size * spec.size
    if spec.car_targets:
        cars = np.array([c for c, _ in spec.car_targets])
        w = np.array([w for _, w in spec.car_targets], dtype=np.float64)
        return float(cars[rng.choice(len(cars), p=w / w.sum())])
    lo, hi = spec.car_range
    # snap to the pixel grid so every draw is reachable
    return round(rng.uniform(lo, hi) * npix) / npix


def synthetic_sample(spec: SyntheticSpec, seed: int, index: int, split: str = "train") -> BitemporalSample:
    rng = rng_for(seed, f"data:{split}", index)
    size, npix = spec.size, spec.size * spec.size
    target = _draw_targets(rng, spec)
    k = _target_pixels(target, npix)
    clean = _background(rng, size, 0.0)
    shapes = _change_label(rng, spec, k) if k else []

    after = clean.copy()
    for m in shapes:
        # bright or dark per channel so the change is visible on any background
        color = np.where(rng.random(3) < 0.5, rng.uniform(0.0, 0.15, 3), rng.uniform(0.8, 1.0, 3))
        tex = rng.normal(0, 0.03, (3, size, size))
        after[:, m] = np.clip(color[:, None] + tex[:, m], 0, 1)
    label = np.zeros((size, size), dtype=np.uint8)
    for m in shapes:
        label[m] = 1

    # unlabeled radiometric difference between the dates, scaled with the noise level
    gain = 1.0 + rng.uniform(-3, 3) * spec.noise
    offset = rng.uniform(-2, 2) * spec.noise
    img_a = np.clip(clean + rng.normal(0, spec.noise, clean.shape), 0, 1)
    img_b = np.clip(after * gain + offset + rng.normal(0, spec.noise, clean.shape), 0, 1)
    # quantize to 8 bits so a save/load round trip is exact
    img_a = (_to_u8(img_a).astype(np.float32) / 255.0)
    img_b = (_to_u8(img_b).astype(np.float32) / 255.0)
    sid = f"{split}-{index:05d}"
    return BitemporalSample(sid, img_a, img_b, label, {"car_target": target})


def generate_synthetic(spec: SyntheticSpec, seed: int = 0, split: str = "train") -> Dataset:
    """Deterministic per (spec, seed, split); sample ``i`` depends only on (seed, split, i)."""
    return Dataset([synthetic_sample(spec, seed, i, split) for i in range(spec.count)], split)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    rotate_prob: float = 0.5
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    brightness_prob: float = 0.5
    brightness_delta: float = 0.125
    contrast_prob: float = 0.5
    contrast_range: tuple[float, float] = (0.75, 1.25)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, 0.0, 0.125, 0.0, (0.75, 1.25))


def augment(sample: BitemporalSample, config: AugmentConfig, rng: np.random.Generator) -> BitemporalSample:
    """Random 90-degree rotation, flips and photometric jitter.

    Geometric ops hit both images and the label; photometric ops hit both
    images identically and never the label. The generator is always advanced
    by the same number of draws, whatever gets applied.
    """
    u = rng.random(5)
    k = int(rng.integers(0, 4))
    delta = rng.uniform(-config.brightness_delta, config.brightness_delta)
    alpha = rng.uniform(*config.contrast_range)

    a, b, y = sample.image_a, sample.image_b, sample.label
    if u[0] < config.rotate_prob and k:
        a, b, y = np.rot90(a, k, (1, 2)), np.rot90(b, k, (1, 2)), np.rot90(y, k)
    if u[1] < config.hflip_prob:
        a, b, y = a[:, :, ::-1], b[:, :, ::-1], y[:, ::-1]
    if u[2] < config.vflip_prob:
        a, b, y = a[:, ::-1], b[:, ::-1], y[::-1]
    photometric = False
    if u[3] < config.brightness_prob:
        a, b = a + np.float32(delta), b + np.float32(delta)
        photometric = True
    if u[4] < config.contrast_prob:
        a, b = a * np.float32(alpha), b * np.float32(alpha)
        photometric = True
    if photometric:
        a, b = np.clip(a, 0, 1), np.clip(b, 0, 1)
    return BitemporalSample(sample.id, np.ascontiguousarray(a, dtype=np.float32),
                            np.ascontiguousarray(b, dtype=np.float32),
                            np.ascontiguousarray(y), dict(sample.meta))


# ---------------------------------------------------------------- splits


def split_dataset(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1),
                  seed: int = 0) -> tuple[Dataset, Dataset, Dataset]:
    """Shuffle, floor-allocate val and test, give the remainder to train."""
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError(f"need three non-negative fractions, got {fractions}")
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    order = rng_for(seed, "split").permutation(n)
    n_val = int(math.floor(fractions[1] * n + 1e-9))
    n_test = int(math.floor(fractions[2] * n + 1e-9))
    n_train = n - n_val - n_test
    pick = lambda idx, tag: Dataset([dataset[int(i)] for i in sorted(idx)], tag)  # noqa: E731
    return (pick(order[:n_train], "train"),
            pick(order[n_train:n_train + n_val], "val"),
            pick(order[n_train + n_val:], "test"))
