"""Experiment configuration: a strict sectioned ``key = value`` text format.

Example (every key except ``experiment.arch`` is optional)::

    # comments start with '#' or ';'
    [experiment]
    arch = fcef-mini              # fcef-mini | fcsiam-diff-mini
    width = 8
    seed = 0
    out = runs/demo
    threshold = 0.5               # change-map binarisation, also used for CAR estimation
    thresholds = 0.05, 0.2        # CAR partition boundaries (closed on the right)
    labels = small, medium, large # defaults: small/large or small/medium/large
    lambda_grid = 1e-5, 5e-4, 1e-3, 5e-3
    lambda_search_iters = 200     # 0 = the student's full budget
    zero_division = one           # one | skip-class

    [data]
    root =                        # empty: synthetic data under <out>/data (see gen-data)
    train_count = 200
    val_count = 40
    test_count = 60
    size = 32
    car_min = 0.0
    car_max = 0.6
    noise = 0.02

    [train]                       # defaults shared by every role
    max_iters = 2000
    warmup_iters = 100
    batch_size = 8
    initial_lr = 1e-3
    warmup_start_lr = 1e-6
    lr_kind = linear              # linear | cosine
    eval_every = 100
    weight_decay = 0.01
    beta1 = 0.9
    beta2 = 0.99
    adam_eps = 1e-8
    augment = true

    [original]                    # per-role overrides of any [train] key
    [teacher]
    [student]
    max_iters = 1000
    warmup_iters = 50
    lambda = 0.1
    kd_target = probability       # probability | logits

Unknown sections or keys, duplicate keys and unparsable values are errors
that name the offending line.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

from .car import PartitionSpec
from .data import SyntheticSpec
from .models import ARCHS
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.split(",") if x.strip())


def _strs(s: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in s.split(",") if x.strip())


def _arch(s: str) -> str:
    if s not in ARCHS:
        raise ValueError(f"unknown architecture {s!r}; expected one of {ARCHS}")
    return s


TRAIN_KEYS = {
    "max_iters": int, "warmup_iters": int, "batch_size": int, "initial_lr": float,
    "warmup_start_lr": float, "lr_kind": str, "eval_every": int, "weight_decay": float,
    "beta1": float, "beta2": float, "adam_eps": float, "augment": _bool,
}
STUDENT_KEYS = {**TRAIN_KEYS, "lambda": float, "kd_target": str}

SCHEMA = {
    "experiment": {
        "arch": _arch, "width": int, "seed": int, "out": str, "threshold": float,
        "thresholds": _floats, "labels": _strs, "lambda_grid": _floats,
        "lambda_search_iters": int, "zero_division": str,
    },
    "data": {
        "root": str, "train_count": int, "val_count": int, "test_count": int, "size": int,
        "car_min": float, "car_max": float, "noise": float,
    },
    "train": TRAIN_KEYS,
    "original": TRAIN_KEYS,
    "teacher": TRAIN_KEYS,
    "student": STUDENT_KEYS,
}
REQUIRED = {("experiment", "arch")}
REQUIRED_SECTIONS = ("experiment", "data")

ROLE_DEFAULTS = {
    "original": {},
    "teacher": {},
    "student": {"max_iters": 1000, "warmup_iters": 50, "lam": 0.1},
}


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    train_count: int = 200
    val_count: int = 40
    test_count: int = 60
    size: int = 32
    car_min: float = 0.0
    car_max: float = 0.6
    noise: float = 0.02

    def synthetic_spec(self, split: str) -> SyntheticSpec:
        count = {"train": self.train_count, "val": self.val_count, "test": self.test_count}[split]
        return SyntheticSpec(count=count, size=self.size, car_range=(self.car_min, self.car_max),
                             noise=self.noise)


@dataclass(frozen=True)
class ExperimentConfig:
    arch: str
    width: int = 8
    seed: int = 0
    out: str = "runs/default"
    threshold: float = 0.5
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    lambda_grid: tuple[float, ...] = (1e-5, 5e-4, 1e-3, 5e-3)
    lambda_search_iters: int = 200
    zero_division: str = "one"
    data: DataConfig = field(default_factory=DataConfig)
    original: TrainConfig = field(default_factory=TrainConfig)
    teacher: TrainConfig = field(default_factory=TrainConfig)
    student: TrainConfig = field(default_factory=lambda: TrainConfig(max_iters=1000, warmup_iters=50, lam=0.1))

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    @property
    def data_root(self) -> Path:
        return Path(self.data.root) if self.data.root else self.out_dir / "data"

    def role(self, name: str) -> TrainConfig:
        return {"original": self.original, "teacher": self.teacher, "student": self.student}[name]

    def with_overrides(self, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        cfg = self
        if out is not None:
            cfg = replace(cfg, out=out)
        if seed is not None:
            cfg = replace(cfg, seed=seed, original=replace(cfg.original, seed=seed),
                          teacher=replace(cfg.teacher, seed=seed), student=replace(cfg.student, seed=seed))
        return cfg


def parse_text(text: str, source: str = "<config>") -> dict[str, dict[str, tuple[object, int]]]:
    """Parse into {section: {key: (value, line)}} with schema-typed values."""
    out: dict[str, dict[str, tuple[object, int]]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw
        for mark in ("#", ";"):
            if mark in line:
                line = line[:line.index(mark)]
        line = line.strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"{where}: unknown section [{section}]")
            if section in out:
                raise ConfigError(f"{where}: duplicate section [{section}]")
            out[section] = {}
            continue
        if section is None:
            raise ConfigError(f"{where}: key outside of any section")
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError(f"{where}: unknown key {key!r} in [{section}]")
        if key in out[section]:
            raise ConfigError(f"{where}: duplicate key {key!r} in [{section}]")
        if value == "" and key != "root":
            raise ConfigError(f"{where}: key {key!r} has no value")
        try:
            parsed = SCHEMA[section][key](value) if value != "" else None
        except ValueError as exc:
            raise ConfigError(f"{where}: cannot parse {key!r} = {value!r}: {exc}") from None
        out[section][key] = (parsed, lineno)
    return out


def _train_config(parsed, role: str, seed: int, threshold: float, zero_division: str) -> TrainConfig:
    values = dict(ROLE_DEFAULTS[role])
    for sec in ("train", role):
        for key, (val, _) in parsed.get(sec, {}).items():
            values["lam" if key == "lambda" else key] = val
    return TrainConfig(seed=seed, threshold=threshold, zero_division=zero_division, **values)


def from_text(text: str, source: str = "<config>") -> ExperimentConfig:
    parsed = parse_text(text, source)
    for sec in REQUIRED_SECTIONS:
        if sec not in parsed:
            raise ConfigError(f"{source}: missing required section [{sec}]")
    for sec, key in REQUIRED:
        if key not in parsed.get(sec, {}):
            raise ConfigError(f"{source}: missing required key {key!r} in [{sec}]")

    exp = {k: v for k, (v, _) in parsed["experiment"].items()}
    line_of = {k: ln for k, (_, ln) in parsed["experiment"].items()}

    def guarded(section: str, keys, build):
        try:
            return build()
        except (ValueError, TypeError) as exc:
            lines = sorted({parsed.get(section, {})[k][1] for k in keys if k in parsed.get(section, {})})
            at = f"{source}:{lines[0]}" if lines else source
            raise ConfigError(f"{at}: invalid [{section}] {'/'.join(keys)}: {exc}") from None

    partition = guarded("experiment", ("thresholds", "labels"), lambda: PartitionSpec(
        exp.get("thresholds", (0.05, 0.2)), exp.get("labels", ())))
    zero_division = exp.get("zero_division", "one")
    if zero_division not in ("one", "skip-class"):
        raise ConfigError(f"{source}:{line_of['zero_division']}: zero_division must be one or skip-class")
    seed = exp.get("seed", 0)
    threshold = exp.get("threshold", 0.5)
    if not 0 < threshold < 1:
        raise ConfigError(f"{source}:{line_of['threshold']}: threshold must lie in (0, 1)")
    if "width" in exp and exp["width"] < 4:
        raise ConfigError(f"{source}:{line_of['width']}: width must be >= 4")

    data_vals = {k: v for k, (v, _) in parsed["data"].items()}
    data = guarded("data", tuple(data_vals), lambda: DataConfig(**data_vals))
    if data.root is None:
        for split in ("train", "val", "test"):
            guarded("data", tuple(data_vals), lambda s=split: data.synthetic_spec(s))

    roles = {}
    for role in ("original", "teacher", "student"):
        keys = tuple(parsed.get(role, {})) or tuple(parsed.get("train", {}))
        sec = role if role in parsed else "train"
        roles[role] = guarded(sec, keys, lambda r=role: _train_config(parsed, r, seed, threshold, zero_division))

    grid = exp.get("lambda_grid", (1e-5, 5e-4, 1e-3, 5e-3))
    if not grid or any(v < 0 for v in grid):
        raise ConfigError(f"{source}:{line_of.get('lambda_grid', 0)}: lambda_grid must be non-empty and >= 0")
    return ExperimentConfig(
        arch=exp["arch"], width=exp.get("width", 8), seed=seed, out=exp.get("out", "runs/default"),
        threshold=threshold, partition=partition, lambda_grid=grid,
        lambda_search_iters=exp.get("lambda_search_iters", 200), zero_division=zero_division,
        data=data, **roles)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return from_text(path.read_text(encoding="utf-8"), str(path))
