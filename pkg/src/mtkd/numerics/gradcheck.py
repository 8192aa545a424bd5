"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, branch_trace


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    checked: int  # coordinates compared
    skipped_kinks: int  # coordinates whose +/- eps evaluations straddle a kink
    unresolved: int = 0  # coordinates whose gradient is below floating-point resolution


RESOLUTION_ULPS = 4


def grad_check_report(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
                      max_elements: int | None = None, seed: int = 0,
                      skip_kinks: bool = False, skip_unresolved: bool = False) -> GradCheckReport:
    """Compare analytic gradients with central differences ``(f(x+eps) - f(x-eps)) / (2 eps)``.

    ``fn`` maps one Tensor per entry of ``inputs`` to a scalar Tensor; inputs
    are copied to float64. The error per coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``. With ``max_elements``, larger inputs
    are checked on that many coordinates drawn from ``seed``.

    With ``skip_kinks``, a coordinate is left out when a relu, abs, max-pool
    or clamp takes a different branch at ``x + eps`` than at ``x - eps``:
    the central difference then spans a non-differentiable point and says
    nothing about the gradient at ``x``.

    With ``skip_unresolved``, a coordinate is left out when both gradients
    move ``f`` by at most ``RESOLUTION_ULPS`` units in the last place over
    the ``2 eps`` step. Such a difference is rounding noise (typically a
    parameter the loss is locally invariant to, analytic gradient exactly 0).
    """
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    for a in arrays:
        if not np.isfinite(a).all():
            raise FloatingPointError("grad_check: non-finite input")

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = fn(*tensors)
    if loss.dtype != np.float64:
        raise TypeError("grad_check needs a float64 graph")
    backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    floor = RESOLUTION_ULPS * float(np.spacing(abs(loss.item()))) / (2 * eps)

    def value() -> tuple[float, list[bytes]]:
        with branch_trace() as trace:
            out = fn(*[Tensor(a) for a in arrays]).item()
        if not np.isfinite(out):
            raise FloatingPointError("grad_check: non-finite function value")
        return out, trace

    rng = np.random.default_rng(seed)
    worst, checked, skipped, unresolved = 0.0, 0, 0, 0
    for a, ga in zip(arrays, analytic):
        flat = a.reshape(-1)
        coords = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            coords = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        gflat = ga.reshape(-1)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp, tp = value()
            flat[i] = orig - eps
            fm, tm = value()
            flat[i] = orig
            if skip_kinks and tp != tm:
                skipped += 1
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(gflat[i])
            if skip_unresolved and ana != num and max(abs(ana), abs(num)) <= floor:
                unresolved += 1
                continue
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
            checked += 1
    return GradCheckReport(worst, checked, skipped, unresolved)


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               max_elements: int | None = None, seed: int = 0, skip_kinks: bool = False,
               skip_unresolved: bool = False) -> float:
    """Max relative error between analytic and numeric gradients (see :func:`grad_check_report`)."""
    return grad_check_report(fn, inputs, eps, max_elements, seed, skip_kinks, skip_unresolved).max_rel_error
