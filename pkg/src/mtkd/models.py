"""Miniature FC-EF (early fusion) and FC-Siam-Diff change-detection networks.

Both are two-stage U-Nets. With width ``w``::

    enc1: conv3x3(cin -> w), conv3x3(w -> w)          @ H
    enc2: conv3x3(w -> 2w), conv3x3(2w -> 2w)         @ H/2
    bott: conv3x3(2w -> 4w), conv3x3(4w -> 4w)        @ H/4
    dec2: up(4w) ++ skip2(2w) -> conv3x3(6w -> 2w)    @ H/2
    dec1: up(2w) ++ skip1(w)  -> conv3x3(3w -> w)     @ H
    head: conv1x1(w -> 1) -> sigmoid

fcef-mini feeds the 6-channel concatenation of both images (cin = 6).
fcsiam-diff-mini runs the shared encoder (cin = 3) on each image and passes
only ``|f1 - f2|`` features forward, so its output is invariant to swapping
the two images.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import tensor as T
from .numerics.tensor import Tensor
from .rng import rng_for

ARCHS = ("fcef-mini", "fcsiam-diff-mini")
CKPT_MAGIC = b"MTKDCKPT1"


def _layer_table(arch: str, w: int) -> list[tuple[str, int, int, int]]:
    """(layer name, in channels, out channels, kernel) in forward order."""
    cin = 6 if arch == "fcef-mini" else 3
    return [
        ("enc1.conv1", cin, w, 3),
        ("enc1.conv2", w, w, 3),
        ("enc2.conv1", w, 2 * w, 3),
        ("enc2.conv2", 2 * w, 2 * w, 3),
        ("bott.conv1", 2 * w, 4 * w, 3),
        ("bott.conv2", 4 * w, 4 * w, 3),
        ("dec2.conv", 6 * w, 2 * w, 3),
        ("dec1.conv", 3 * w, w, 3),
        ("head", w, 1, 1),
    ]


def expected_param_count(arch: str, width: int) -> int:
    return sum(co * ci * k * k + co for _, ci, co, k in _layer_table(arch, width))


@dataclass
class ModelParams:
    arch: str
    width: int
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, self.width, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.arch, self.width,
                           {k: v.astype(dtype) for k, v in self.params.items()})

    def num_params(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def equals(self, other: "ModelParams") -> bool:
        """Bit-exact comparison of architecture and every tensor."""
        if (self.arch, self.width) != (other.arch, other.width):
            return False
        if self.params.keys() != other.params.keys():
            return False
        return all(self.params[k].dtype == other.params[k].dtype
                   and self.params[k].tobytes() == other.params[k].tobytes()
                   for k in self.params)


def build_model(arch: str, width: int = 8, seed: int = 0) -> ModelParams:
    """He-uniform weights (bound sqrt(6 / fan_in)) from the seed's "init" stream, zero biases."""
    if arch not in ARCHS:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    if width < 4:
        raise ValueError(f"width must be >= 4, got {width}")
    rng = rng_for(seed, "init")
    params: dict[str, np.ndarray] = {}
    for name, cin, cout, k in _layer_table(arch, width):
        bound = np.sqrt(6.0 / (cin * k * k))
        params[f"{name}.weight"] = rng.uniform(-bound, bound, size=(cout, cin, k, k)).astype(np.float32)
        params[f"{name}.bias"] = np.zeros(cout, dtype=np.float32)
    return ModelParams(arch, width, params)


def as_tensors(model: ModelParams, requires_grad: bool = False) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in model.params.items()}


def _conv(p: dict[str, Tensor], name: str, x: Tensor, act: bool = True) -> Tensor:
    w = p[f"{name}.weight"]
    pad = w.shape[-1] // 2
    y = T.conv2d(x, w, p[f"{name}.bias"], stride=1, padding=pad)
    return T.relu(y) if act else y


def _encode(p: dict[str, Tensor], x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    s1 = _conv(p, "enc1.conv2", _conv(p, "enc1.conv1", x))
    s2 = _conv(p, "enc2.conv2", _conv(p, "enc2.conv1", T.maxpool2x2(s1)))
    return s1, s2, T.maxpool2x2(s2)


def _decode(p: dict[str, Tensor], skip1: Tensor, skip2: Tensor, deep: Tensor) -> Tensor:
    b = _conv(p, "bott.conv2", _conv(p, "bott.conv1", deep))
    d2 = _conv(p, "dec2.conv", T.concat_channels(T.upsample2x_nearest(b), skip2))
    d1 = _conv(p, "dec1.conv", T.concat_channels(T.upsample2x_nearest(d2), skip1))
    return _conv(p, "head", d1, act=False)


def _check_input(x1: Tensor, x2: Tensor) -> None:
    if x1.shape != x2.shape:
        raise ValueError(f"image shapes differ: {x1.shape} vs {x2.shape}")
    if x1.data.ndim != 4 or x1.shape[1] != 3:
        raise ValueError(f"expected images shaped [N,3,H,W], got {x1.shape}")
    h, w = x1.shape[2:]
    if h % 4 or w % 4:
        raise ValueError(f"H and W must be divisible by 4, got {h}x{w}")


def difference_features(params: dict[str, Tensor], x1: Tensor, x2: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """The three |f1 - f2| tensors the siamese decoder consumes."""
    a1, a2, _ = _encode(params, x1)
    b1, b2, _ = _encode(params, x2)
    d1 = T.absolute(a1 - b1)
    d2 = T.absolute(a2 - b2)
    return d1, d2, T.maxpool2x2(d2)


def forward_logits(model: ModelParams, x1, x2, params: dict[str, Tensor] | None = None) -> Tensor:
    """Pre-sigmoid change scores, shape [N,1,H,W].

    ``x1``/``x2`` may be [3,H,W] or [N,3,H,W] arrays or Tensors. Pass
    ``params`` (from :func:`as_tensors`) to keep a handle on the leaves for
    backpropagation.
    """
    x1 = _batched(x1)
    x2 = _batched(x2)
    _check_input(x1, x2)
    p = params if params is not None else as_tensors(model)
    if model.arch == "fcef-mini":
        s1, s2, deep = _encode(p, T.concat_channels(x1, x2))
        return _decode(p, s1, s2, deep)
    if model.arch == "fcsiam-diff-mini":
        return _decode(p, *difference_features(p, x1, x2))
    raise ValueError(f"unknown architecture {model.arch!r}")


def forward(model: ModelParams, x1, x2, params: dict[str, Tensor] | None = None) -> Tensor:
    """Change map: per-pixel change probability, shape [N,1,H,W]."""
    return T.sigmoid(forward_logits(model, x1, x2, params))


def change_map(model: ModelParams, x1, x2) -> np.ndarray:
    """Inference helper returning the [H,W] (or [N,H,W]) probability array."""
    single = np.asarray(x1.data if isinstance(x1, Tensor) else x1).ndim == 3
    cm = forward(model, x1, x2).data[:, 0]
    return cm[0] if single else cm


def predict_mask(cm, threshold: float = 0.5) -> np.ndarray:
    """1 where the change probability is strictly above ``threshold``."""
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    cm = cm.data if isinstance(cm, Tensor) else np.asarray(cm)
    return (cm > threshold).astype(np.uint8)


def _batched(x) -> Tensor:
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x))
    if x.data.ndim == 3:
        return T._result(x.data[None], (x,), lambda g: (g[0],))
    return x


# ---------------------------------------------------------------- checkpoints
#
# Layout (all integers little-endian):
#   b"MTKDCKPT1"
#   uint32  manifest length in bytes
#   manifest: UTF-8 JSON {"arch", "width", "tensors": [{"name", "shape",
#             "offset", "nbytes"}, ...]} with keys sorted
#   payload:  the tensors as raw little-endian float32, back to back, in
#             manifest order; offsets are relative to the payload start


def save_checkpoint(model: ModelParams, path) -> None:
    entries = []
    payload = io.BytesIO()
    for name in sorted(model.params):
        arr = np.ascontiguousarray(model.params[name], dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": payload.tell(), "nbytes": arr.nbytes})
        payload.write(arr.tobytes())
    manifest = json.dumps({"arch": model.arch, "width": model.width, "tensors": entries},
                          sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        fh.write(payload.getvalue())


def load_checkpoint(path) -> ModelParams:
    blob = Path(path).read_bytes()
    if not blob.startswith(CKPT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CKPT_MAGIC)
    (mlen,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    manifest = json.loads(blob[pos:pos + mlen].decode("utf-8"))
    base = pos + mlen
    params = {}
    for ent in manifest["tensors"]:
        start = base + ent["offset"]
        raw = blob[start:start + ent["nbytes"]]
        if len(raw) != ent["nbytes"]:
            raise ValueError(f"{path}: truncated payload for {ent['name']}")
        params[ent["name"]] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(ent["shape"])
    model = ModelParams(manifest["arch"], int(manifest["width"]), params)
    if model.arch not in ARCHS:
        raise ValueError(f"{path}: unknown architecture {model.arch!r}")
    expected = {f"{n}.{s}" for n, *_ in _layer_table(model.arch, model.width) for s in ("weight", "bias")}
    if set(params) != expected:
        raise ValueError(f"{path}: tensor set does not match {model.arch} at width {model.width}")
    return model
