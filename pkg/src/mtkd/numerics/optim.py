"""AdamW with decoupled weight decay, and warmup learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.99
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: OptimizerState, lr: float) -> None:
    """One in-place AdamW update of every array in ``params``.

    p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    """
    if lr < 0:
        raise ValueError(f"learning rate must be >= 0, got {lr}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"grad for {name} has shape {g.shape}, param has {p.shape}")
        dt = p.dtype.type
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= dt(b1)
        m += dt(1 - b1) * g
        v *= dt(b2)
        v += dt(1 - b2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p -= dt(lr) * (m_hat / (np.sqrt(v_hat) + dt(state.eps)) + dt(state.weight_decay) * p)


LR_KINDS = ("linear", "cosine")


@dataclass(frozen=True)
class LrSchedule:
    """Linear warmup from ``warmup_start_lr`` then linear or cosine decay to 0."""

    kind: str = "linear"
    warmup_iters: int = 100
    max_iters: int = 2000
    warmup_start_lr: float = 1e-6
    initial_lr: float = 1e-3

    def __post_init__(self):
        if self.kind not in LR_KINDS:
            raise ValueError(f"lr kind must be one of {LR_KINDS}, got {self.kind!r}")
        # warmup 0 is allowed so single-step runs have a valid schedule
        if not 0 <= self.warmup_iters < self.max_iters:
            raise ValueError(
                f"need 0 <= warmup_iters < max_iters, got {self.warmup_iters}, {self.max_iters}")
        if self.warmup_start_lr < 0 or self.initial_lr < 0:
            raise ValueError("learning rates must be non-negative")


def lr_at(schedule: LrSchedule, it: int) -> float:
    if it < 0 or it > schedule.max_iters:
        raise ValueError(f"iteration {it} outside [0, {schedule.max_iters}]")
    w, total = schedule.warmup_iters, schedule.max_iters
    if it <= w and w > 0:
        frac = it / w
        return schedule.warmup_start_lr + frac * (schedule.initial_lr - schedule.warmup_start_lr)
    progress = (it - w) / (total - w)
    if schedule.kind == "linear":
        return schedule.initial_lr * (1.0 - progress)
    return schedule.initial_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
