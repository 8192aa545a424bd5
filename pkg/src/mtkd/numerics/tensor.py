"""Reverse-mode differentiable tensor and the handful of ops the models need.

Every op takes and returns :class:`Tensor`. An op only records a backward
closure when at least one input requires a gradient, so inference on plain
parameter arrays builds no graph at all.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

BCE_EPS = 1e-7

# Branch decisions of the non-smooth ops (relu mask, abs sign, pool argmax,
# bce clamp), collected only inside branch_trace().
_TRACE: list[bytes] | None = None


@contextmanager
def branch_trace() -> Iterator[list[bytes]]:
    """Record which side of every kink each non-smooth op landed on."""
    global _TRACE
    prev, _TRACE = _TRACE, []
    try:
        yield _TRACE
    finally:
        _TRACE = prev


def _branch(decision: np.ndarray) -> None:
    if _TRACE is not None:
        _TRACE.append(decision.tobytes())


class Tensor:
    """Dense float array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{rg})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # Arithmetic sugar used by losses and the siamese difference path.
    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return total(self)

    def mean(self) -> "Tensor":
        return mean(self)


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.full(like.shape, x, dtype=like.dtype))


def _result(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    if not np.isfinite(data).all():
        raise FloatingPointError("non-finite value produced in forward pass")
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable tensor.

    Gradients accumulate across calls; reset them with ``zero_grad`` first
    if that is not wanted.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss is detached: no input requires a gradient")

    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    # interior nodes keep local buffers; leaves accumulate
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node._accumulate(g)
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("non-finite loss")


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"sub: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    _branch(sign)
    return _result(np.abs(a.data), (a,), lambda g: (g * sign,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _branch(mask)
    return _result(np.maximum(x.data, x.dtype.type(0)), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # split form keeps exp() from overflowing on large |x|
    z = x.data
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype)
    return _result(s, (x,), lambda g: (g * s * (1 - s),))


def activation(x: Tensor, kind: str) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------- reductions


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g, shape).astype(x.dtype),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.data.size
    return _result(np.asarray(x.data.mean(), dtype=x.dtype), (x,),
                   lambda g: (np.broadcast_to(g / n, shape).astype(x.dtype),))


# ---------------------------------------------------------------- structural


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ValueError("concat_channels expects 4-d tensors [N,C,H,W]")
    na, ca, ha, wa = a.shape
    nb, cb, hb, wb = b.shape
    if (na, ha, wa) != (nb, hb, wb):
        raise ValueError(f"concat_channels: batch/spatial mismatch {a.shape} vs {b.shape}")
    out = np.concatenate([a.data, b.data], axis=1)
    return _result(out, (a, b), lambda g: (g[:, :ca], g[:, ca:]))


def batch_slice(x: Tensor, start: int, stop: int) -> Tensor:
    n = x.shape[0]

    def bw(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return (full,)

    if not 0 <= start <= stop <= n:
        raise ValueError(f"batch_slice [{start}:{stop}] out of range for batch {n}")
    return _result(x.data[start:stop], (x,), bw)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2/stride-2 max pool; ties send the gradient to the first element in row-major order."""
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)  # argmax returns the first maximum
    _branch(idx)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        dwin = np.zeros(win.shape, dtype=x.dtype)
        np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
        dx = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return (dx.reshape(n, c, h, w),)

    return _result(out, (x,), bw)


def upsample2x_nearest(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)

    def bw(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), bw)


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [N,C,H,W] with ``weight`` [F,C,kh,kw]."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ValueError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, cw, kh, kw = weight.shape
    if c != cw:
        raise ValueError(f"conv2d: input has {c} channels but weight expects {cw}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d: kernel must be odd, got {kh}x{kw}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match {f} filters")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be >= 1 and padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if (hp - kh) % stride or (wp - kw) % stride or hp < kh or wp < kw:
        raise ValueError(
            f"conv2d: output size not integral for H={h}, W={w}, k={kh}x{kw}, "
            f"stride={stride}, padding={padding}")
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    hspan, wspan = stride * (ho - 1) + 1, stride * (wo - 1) + 1

    # Channel-last padded input flattened to rows. For kernel offset (i, j)
    # the needed input rows are the contiguous block starting at i*wp + j, so
    # each offset is one plain matmul. Rows that straddle an image edge land
    # on discarded output positions.
    xp = np.zeros((n, hp, wp, c), dtype=x.dtype)
    xp[:, padding:padding + h, padding:padding + w, :] = x.data.transpose(0, 2, 3, 1)
    rows = xp.reshape(n * hp * wp, c)
    span = n * hp * wp - ((kh - 1) * wp + (kw - 1))
    wk = np.ascontiguousarray(weight.data.transpose(2, 3, 1, 0))  # [kh, kw, c, f]
    offsets = [(i, j, i * wp + j) for i in range(kh) for j in range(kw)]

    full = np.zeros((n * hp * wp, f), dtype=x.dtype)
    acc = full[:span]
    for i, j, o in offsets:
        acc += rows[o:o + span] @ wk[i, j]
    out = full.reshape(n, hp, wp, f)[:, :hspan:stride, :wspan:stride]
    if bias is not None:
        out = out + bias.data
    # channel-last in memory; elementwise ops downstream keep that layout
    out = out.transpose(0, 3, 1, 2)

    def bw(g):
        gfull = np.zeros((n * hp * wp, f), dtype=x.dtype)
        gfull.reshape(n, hp, wp, f)[:, :hspan:stride, :wspan:stride] = g.transpose(0, 2, 3, 1)
        gr = gfull[:span]
        dw = db = dx = None
        if weight.requires_grad:
            dwk = np.empty((kh, kw, c, f), dtype=x.dtype)
            for i, j, o in offsets:
                dwk[i, j] = rows[o:o + span].T @ gr
            dw = dwk.transpose(3, 2, 0, 1)
        if bias is not None and bias.requires_grad:
            db = g.sum(axis=(0, 2, 3))
        if x.requires_grad:
            drows = np.zeros((n * hp * wp, c), dtype=x.dtype)
            for i, j, o in offsets:
                drows[o:o + span] += gr @ wk[i, j].T
            dx = drows.reshape(n, hp, wp, c)[:, padding:padding + h, padding:padding + w]
            dx = dx.transpose(0, 3, 1, 2)
        return (dx, dw, db) if bias is not None else (dx, dw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _result(out, parents, bw)


# ---------------------------------------------------------------- losses


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce(per_pixel: np.ndarray, reduction: str) -> tuple[np.ndarray, int]:
    """Mean over everything ("mean") or over all but the leading axis ("sample")."""
    if reduction == "mean":
        return np.asarray(per_pixel.mean(), dtype=per_pixel.dtype), per_pixel.size
    if reduction == "sample":
        m = per_pixel.shape[0]
        count = per_pixel.size // m
        return per_pixel.reshape(m, -1).mean(axis=1), count
    raise ValueError(f"unknown reduction {reduction!r}")


def _expand(g: np.ndarray, shape: tuple[int, ...], count: int, reduction: str) -> np.ndarray:
    if reduction == "mean":
        return np.broadcast_to(g / count, shape)
    return np.broadcast_to((g / count).reshape((-1,) + (1,) * (len(shape) - 1)), shape)


def bce_loss(pred: Tensor, target, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on probabilities, averaged over pixels.

    ``pred`` is clamped to [1e-7, 1 - 1e-7] before the logs; clamped entries
    get zero gradient. With ``reduction="sample"`` the result is one loss per
    leading-axis entry (one per image of a batch).
    """
    y = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    _check_pair(pred, Tensor(y), "bce_loss")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("bce_loss: target values must be 0 or 1")
    y = y.astype(pred.dtype, copy=False)
    eps = pred.dtype.type(BCE_EPS)
    p = np.clip(pred.data, eps, 1 - eps)
    per_pixel = -(y * np.log(p) + (1 - y) * np.log(1 - p))
    value, count = _reduce(per_pixel, reduction)
    inside = (pred.data >= eps) & (pred.data <= 1 - eps)
    _branch(inside)
    dpix = ((p - y) / (p * (1 - p))) * inside

    def bw(g):
        return (_expand(g, pred.shape, count, reduction) * dpix,)

    return _result(value, (pred,), bw)


def mse_loss(a: Tensor, b, reduction: str = "mean") -> Tensor:
    """Mean squared difference; ``b`` is treated as a constant target."""
    bd = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=a.dtype)
    _check_pair(a, Tensor(bd), "mse_loss")
    diff = a.data - bd
    value, count = _reduce(diff * diff, reduction)

    def bw(g):
        return (_expand(g, a.shape, count, reduction) * 2 * diff,)

    return _result(value, (a,), bw)
