"""Training loops: the original model, CAR-partition teachers, and the distilled student.

All three share one loop (:func:`_fit`). The per-sample loss is binary
cross-entropy over the image's pixels; the student adds ``lam`` times the
squared-error distance to its teacher's change map. The batch loss is the
mean of the per-sample losses, and the checkpoint with the best validation
mIoU (earliest on ties) is returned.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import models as M
from .car import PartitionSpec, compute_car, partition_of
from .data import AugmentConfig, BitemporalSample, Dataset, augment
from .metrics import MetricsReport, dataset_metrics
from .numerics import LrSchedule, OptimizerState, adamw_step, lr_at
from .numerics import tensor as T
from .rng import rng_for

log = logging.getLogger(__name__)

KD_TARGETS = ("probability", "logits")


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 2000
    warmup_iters: int = 100
    batch_size: int = 8
    initial_lr: float = 1e-3
    warmup_start_lr: float = 1e-6
    lr_kind: str = "linear"
    eval_every: int = 100
    threshold: float = 0.5
    lam: float = 0.0
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    augment: bool = True
    kd_target: str = "probability"
    zero_division: str = "one"

    def __post_init__(self):
        if self.max_iters < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("max_iters, batch_size and eval_every must be >= 1")
        if self.max_iters % self.eval_every:
            raise ValueError(f"eval_every={self.eval_every} must divide max_iters={self.max_iters}")
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if not 0 < self.threshold < 1:
            raise ValueError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.kd_target not in KD_TARGETS:
            raise ValueError(f"kd_target must be one of {KD_TARGETS}")
        self.schedule()  # validates warmup/max_iters/lr_kind

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr_kind, self.warmup_iters, self.max_iters,
                          self.warmup_start_lr, self.initial_lr)


@dataclass
class History:
    role: str
    rows: list[dict] = field(default_factory=list)
    best_iter: int | None = None
    best_val_miou: float = -math.inf
    teacher_choices: list[tuple[int, str, str]] = field(default_factory=list)

    def evaluations(self) -> list[tuple[int, float]]:
        return [(r["iter"], r["val_mIoU"]) for r in self.rows if r["val_mIoU"] is not None]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "lr", "loss", "val_mIoU"])
            for r in self.rows:
                miou = "" if r["val_mIoU"] is None else repr(r["val_mIoU"])
                w.writerow([r["iter"], repr(r["lr"]), repr(r["loss"]), miou])


def select_checkpoint(evaluations: list[tuple[int, float]]) -> tuple[int, float]:
    """Iteration with the highest validation mIoU; the earliest one wins ties."""
    if not evaluations:
        raise ValueError("no evaluations to select from")
    best_iter, best = evaluations[0]
    for it, miou in evaluations[1:]:
        if miou > best:
            best_iter, best = it, miou
    return best_iter, best


# ---------------------------------------------------------------- evaluation


def _stack(samples: list[BitemporalSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x1 = np.stack([s.image_a for s in samples]).astype(np.float32, copy=False)
    x2 = np.stack([s.image_b for s in samples]).astype(np.float32, copy=False)
    y = np.stack([s.label for s in samples])[:, None].astype(np.float32)
    return x1, x2, y


def predict_dataset(model: M.ModelParams, dataset: Dataset, threshold: float = 0.5,
                    batch_size: int = 16) -> list[np.ndarray]:
    out = []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset.samples[start:start + batch_size]
        x1, x2, _ = _stack(chunk)
        cm = M.forward(model, x1, x2).data[:, 0]
        out.extend(M.predict_mask(c, threshold) for c in cm)
    return out


def evaluate_model(model: M.ModelParams, dataset: Dataset, threshold: float = 0.5,
                   zero_division: str = "one") -> MetricsReport:
    preds = predict_dataset(model, dataset, threshold)
    return dataset_metrics(((s.label, p, s.id) for s, p in zip(dataset, preds)), zero_division)


# ---------------------------------------------------------------- the loop


class BatchStream:
    """Endless index stream: a fresh seeded permutation every epoch, batches span epochs."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.batch_size = n, batch_size
        self.rng = rng_for(seed, "shuffle")
        self._perm: list[int] = []

    def next(self) -> list[int]:
        out = []
        while len(out) < self.batch_size:
            if not self._perm:
                self._perm = self.rng.permutation(self.n).tolist()
            out.append(self._perm.pop(0))
        return out


# (iteration, batch samples, student logits, student change map, per-sample loss) -> per-sample loss
LossHook = Callable[[int, list, T.Tensor, T.Tensor, T.Tensor], T.Tensor]


def _fit(init: M.ModelParams, dataset: Dataset, valset: Dataset, config: TrainConfig,
         role: str, loss_hook: LossHook | None = None,
         on_step: Callable[[int, M.ModelParams], None] | None = None) -> tuple[M.ModelParams, History]:
    if len(dataset) == 0:
        raise ValueError(f"{role}: training set is empty")
    if len(valset) == 0:
        raise ValueError(f"{role}: validation set is empty")
    model = init.copy()
    schedule = config.schedule()
    opt = OptimizerState(config.beta1, config.beta2, config.adam_eps, config.weight_decay)
    stream = BatchStream(len(dataset), config.batch_size, config.seed)
    aug_rng = rng_for(config.seed, "augment")
    aug_cfg = AugmentConfig() if config.augment else AugmentConfig.disabled()
    history = History(role)
    best = model.copy()

    for it in range(config.max_iters):
        batch = [augment(dataset[i], aug_cfg, aug_rng) for i in stream.next()]
        x1, x2, y = _stack(batch)
        lr = lr_at(schedule, it)
        leaves = M.as_tensors(model, requires_grad=True)
        try:
            logits = M.forward_logits(model, x1, x2, leaves)
            cm = T.sigmoid(logits)
            per_sample = T.bce_loss(cm, y, reduction="sample")
            if loss_hook is not None:
                per_sample = loss_hook(it, batch, logits, cm, per_sample)
            loss = T.mean(per_sample)
            T.backward(loss)
        except FloatingPointError as exc:
            raise FloatingPointError(
                f"{role}: non-finite values at iteration {it + 1} (lr={lr:.3g}, "
                f"batch={[s.id for s in batch]}): {exc}") from exc
        adamw_step(model.params, {k: t.grad for k, t in leaves.items()}, opt, lr)

        row = {"iter": it + 1, "lr": lr, "loss": loss.item(), "val_mIoU": None}
        if (it + 1) % config.eval_every == 0:
            miou = evaluate_model(model, valset, config.threshold, config.zero_division).aggregate["mIoU"]
            row["val_mIoU"] = miou
            if miou > history.best_val_miou:
                history.best_val_miou, history.best_iter = miou, it + 1
                best = model.copy()
            log.debug("%s iter %d loss %.4f val mIoU %.4f", role, it + 1, row["loss"], miou)
        history.rows.append(row)
        if on_step is not None:
            on_step(it + 1, model)
    log.info("%s: best val mIoU %.4f at iter %d", role, history.best_val_miou, history.best_iter)
    return best, history


def train_model(arch: str, dataset: Dataset, valset: Dataset, config: TrainConfig,
                width: int = 8, init: M.ModelParams | None = None, role: str = "original",
                on_step=None) -> tuple[M.ModelParams, History]:
    """Plain cross-entropy training, from scratch or resumed from ``init``."""
    if init is None:
        init = M.build_model(arch, width, config.seed)
    elif init.arch != arch:
        raise ValueError(f"init model is {init.arch}, asked to train {arch}")
    return _fit(init, dataset, valset, config, role, on_step=on_step)


TeacherBank = dict  # partition label -> ModelParams


def _val_for_partition(valset: Dataset, spec: PartitionSpec, label: str) -> Dataset:
    sub = Dataset([s for s in valset if partition_of(compute_car(s.label), spec) == label], valset.split)
    if len(sub) == 0:
        log.warning("no validation samples in partition %r; selecting its checkpoint on the full "
                    "validation set", label)
        return valset
    return sub


def train_teachers(arch: str, train_partitions: dict[str, Dataset], valset: Dataset,
                   config: TrainConfig, spec: PartitionSpec, width: int = 8) -> TeacherBank:
    """One model per partition, trained from scratch on that partition only."""
    teachers, _ = train_teachers_with_history(arch, train_partitions, valset, config, spec, width)
    return teachers


def train_teachers_with_history(arch, train_partitions, valset, config, spec, width=8):
    for label in spec.labels:
        if len(train_partitions.get(label, ())) == 0:
            raise ValueError(f"partition {label!r} has no training samples; adjust the CAR "
                             f"thresholds {spec.thresholds}")
    teachers, histories = {}, {}
    for label in spec.labels:
        teachers[label], histories[label] = train_model(
            arch, train_partitions[label], _val_for_partition(valset, spec, label), config,
            width=width, role=f"teacher-{label}")
    return teachers, histories


def _check_bank(teachers: TeacherBank, spec: PartitionSpec) -> None:
    if set(teachers) != set(spec.labels):
        raise ValueError(f"teacher labels {sorted(teachers)} do not match partition labels "
                         f"{list(spec.labels)}")


def kd_hook(teachers: TeacherBank, spec: PartitionSpec, config: TrainConfig,
            history: History | None = None) -> LossHook:
    """Per-sample loss hook adding ``lam`` * MSE to the CAR-selected teacher."""
    lam = config.lam

    def hook(it, batch, logits, cm, per_sample):
        chosen = [partition_of(compute_car(s.label), spec) for s in batch]
        x1, x2, _ = _stack(batch)
        target = np.empty(cm.shape, dtype=cm.dtype)
        # one teacher pass per partition present in the batch
        for label in spec.labels:
            idx = [i for i, c in enumerate(chosen) if c == label]
            if not idx:
                continue
            t_logits = M.forward_logits(teachers[label], x1[idx], x2[idx]).data
            target[idx] = t_logits if config.kd_target == "logits" else T.sigmoid(T.Tensor(t_logits)).data
        if history is not None:
            history.teacher_choices.extend((it + 1, s.id, c) for s, c in zip(batch, chosen))
        student = logits if config.kd_target == "logits" else cm
        kd = T.mse_loss(student, target, reduction="sample")
        return per_sample + T.scale(kd, lam)

    return hook


def train_student_mtkd(m_o: M.ModelParams, teachers: TeacherBank, spec: PartitionSpec,
                       dataset: Dataset, valset: Dataset, config: TrainConfig,
                       on_step=None) -> tuple[M.ModelParams, History]:
    """Distil the teacher bank into a student that starts as an exact copy of ``m_o``."""
    _check_bank(teachers, spec)
    for label, t in teachers.items():
        if (t.arch, t.width) != (m_o.arch, m_o.width):
            raise ValueError(f"teacher {label!r} is {t.arch}/w{t.width}, student is {m_o.arch}/w{m_o.width}")
    holder = History("student")
    hook = kd_hook(teachers, spec, config, holder)
    best, history = _fit(m_o, dataset, valset, config, "student", loss_hook=hook, on_step=on_step)
    history.teacher_choices = holder.teacher_choices
    return best, history


def lambda_search(grid, m_o: M.ModelParams, teachers: TeacherBank, spec: PartitionSpec,
                  dataset: Dataset, valset: Dataset, config: TrainConfig,
                  max_iters: int | None = None) -> tuple[float, list[dict]]:
    """Train one student per distinct ``lam``; best validation mIoU wins, smaller ``lam`` on ties.

    ``max_iters`` shortens each run (eval cadence is kept if it divides the
    budget, else a single evaluation at the end); the budget used is
    reported in every table row.
    """
    lams = sorted({float(v) for v in grid})
    if not lams:
        raise ValueError("lambda grid is empty")
    cfg = config
    if max_iters is not None and max_iters != config.max_iters:
        every = config.eval_every if max_iters % config.eval_every == 0 else max_iters
        warm = min(config.warmup_iters, max_iters - 1)
        cfg = replace(config, max_iters=max_iters, eval_every=every, warmup_iters=warm)
    table = []
    best_lam, best = lams[0], -math.inf
    for lam in lams:
        _, hist = train_student_mtkd(m_o, teachers, spec, dataset, valset, replace(cfg, lam=lam))
        table.append({"lambda": lam, "val_mIoU": hist.best_val_miou, "best_iter": hist.best_iter,
                      "max_iters": cfg.max_iters})
        if hist.best_val_miou > best:
            best_lam, best = lam, hist.best_val_miou
    return best_lam, table
