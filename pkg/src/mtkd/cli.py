"""Command-line experiment runner.

Every subcommand reads ``--config``, applies the ``--seed``/``--out``
overrides and writes its artifacts under the output directory::

    <out>/data/<split>/{A,B,label}/*.png       gen-data (synthetic configs)
    <out>/cars-<split>.csv                     compute-car
    <out>/partitions-train.csv, partition-counts.json   partition
    <out>/checkpoints/<role>-<part>-<iter>.ckpt          train-*
    <out>/models.json                          checkpoint index
    <out>/history/<role>-<part>.csv            per-run training curves
    <out>/lambda-search.csv                    lambda-search
    <out>/infer/<mode>/pred/*.png              infer
    <out>/infer/op/routing.csv                 infer/evaluate --mode op
    <out>/eval/<mode>/{metrics.csv,summary.json,partitions.csv}   evaluate
    <out>/eval/op/{confusion.csv,car-distribution.csv}            report-routing
    <out>/eval/comparison.csv                  pipeline (per-CAR-partition mIoU of every mode)
    <out>/gradcheck.json                       grad-check

Log verbosity comes from the ``MTKD_LOG_LEVEL`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from . import models as M
from .car import partition_dataset, partition_of
from .config import ConfigError, ExperimentConfig, load_config
from .data import SPLITS, Dataset, generate_synthetic, load_dataset, save_dataset
from .metrics import MEAN_KEYS, ROW_KEYS, dataset_metrics, partition_report
from .numerics import GradCheckReport, grad_check_report
from .numerics import tensor as T
from .routing import (RoutingRecord, route_and_predict, routing_confusion, write_car_distribution_csv,
                      write_confusion_csv, write_routing_csv)
from .train import (_val_for_partition, lambda_search, predict_dataset, train_model,
                    train_student_mtkd)

log = logging.getLogger("mtkd")

MODES = ("original", "op", "mtkd")
GRAD_TOL = 1e-4


class CliError(Exception):
    pass


# ---------------------------------------------------------------- small I/O helpers


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else v


def _index_path(cfg: ExperimentConfig) -> Path:
    return cfg.out_dir / "models.json"


def _read_index(cfg: ExperimentConfig) -> dict:
    p = _index_path(cfg)
    return json.loads(p.read_text(encoding="utf-8")) if p.is_file() else {}


def _record(cfg: ExperimentConfig, role: str, entries: dict, **extra) -> None:
    index = _read_index(cfg)
    index[role] = {"checkpoints": entries, **extra}
    _write_json(_index_path(cfg), index)


TRAIN_COMMAND = {"original": "train-original", "teacher": "train-teachers", "student": "train-student"}


class _Loader:
    """Loads checkpoints listed in models.json and counts them."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.index = _read_index(cfg)
        self.count = 0

    def load(self, role: str, part: str) -> M.ModelParams:
        try:
            rel = self.index[role]["checkpoints"][part]
        except KeyError:
            raise CliError(f"no {role} checkpoint for {part!r} in {_index_path(self.cfg)}; "
                           f"run {TRAIN_COMMAND[role]} first") from None
        model = M.load_checkpoint(self.cfg.out_dir / rel)
        self.count += 1
        return model

    def teachers(self) -> dict:
        entry = self.index.get("teacher", {})
        stored = tuple(entry.get("thresholds", ()))
        if entry and stored != tuple(self.cfg.partition.thresholds):
            raise CliError(f"teachers were trained with thresholds {stored}, config has "
                           f"{self.cfg.partition.thresholds}")
        return {lab: self.load("teacher", lab) for lab in self.cfg.partition.labels}


def _save_model(cfg: ExperimentConfig, model: M.ModelParams, role: str, part: str, best_iter: int) -> str:
    rel = f"checkpoints/{role}-{part}-{best_iter}.ckpt"
    path = cfg.out_dir / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    M.save_checkpoint(model, path)
    return rel


# ---------------------------------------------------------------- data


def _synthetic(cfg: ExperimentConfig, split: str) -> Dataset:
    return generate_synthetic(cfg.data.synthetic_spec(split), cfg.seed, split)


def _dataset(cfg: ExperimentConfig, split: str) -> Dataset:
    root = cfg.data_root
    if cfg.data.root is None and not (root / split).is_dir():
        log.info("no %s data under %s; generating it", split, root)
        save_dataset(_synthetic(cfg, split), root, split)
    return load_dataset(root, split)


def cmd_gen_data(cfg, args) -> str:
    if cfg.data.root is not None:
        raise CliError("gen-data needs a synthetic config ([data] root must be empty)")
    sizes = []
    for split in SPLITS:
        ds = _synthetic(cfg, split)
        save_dataset(ds, cfg.data_root, split)
        sizes.append(f"{split}={len(ds)}")
    return f"wrote synthetic data to {cfg.data_root} ({', '.join(sizes)})"


def cmd_compute_car(cfg, args) -> str:
    ds = _dataset(cfg, args.split)
    rows = [(s.id, repr(s.car), partition_of(s.car, cfg.partition)) for s in ds]
    path = cfg.out_dir / f"cars-{args.split}.csv"
    _write_csv(path, ["id", "car", "partition"], rows)
    return f"{len(rows)} CAR values -> {path}"


def cmd_partition(cfg, args) -> str:
    ds = _dataset(cfg, "train")
    parts = partition_dataset(ds, cfg.partition)
    rows = [(sid, lab) for lab, sub in parts.items() for sid in sub.ids]
    rows.sort()
    _write_csv(cfg.out_dir / "partitions-train.csv", ["id", "partition"], rows)
    counts = {lab: len(parts[lab]) for lab in cfg.partition.labels}
    _write_json(cfg.out_dir / "partition-counts.json",
                {"thresholds": list(cfg.partition.thresholds), "counts": counts})
    return "partition sizes " + ", ".join(f"{k}={v}" for k, v in counts.items())


# ---------------------------------------------------------------- training


def cmd_train_original(cfg, args) -> str:
    model, hist = train_model(cfg.arch, _dataset(cfg, "train"), _dataset(cfg, "val"), cfg.original,
                              width=cfg.width)
    rel = _save_model(cfg, model, "original", "full", hist.best_iter)
    hist.write_csv(_hist_path(cfg, "original", "full"))
    _record(cfg, "original", {"full": rel})
    return f"original: best val mIoU {hist.best_val_miou:.4f} at iter {hist.best_iter} -> {rel}"


def _hist_path(cfg, role, part) -> Path:
    p = cfg.out_dir / "history" / f"{role}-{part}.csv"
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _teacher_job(cfg: ExperimentConfig, label: str, train_part: Dataset, valset: Dataset):
    model, hist = train_model(cfg.arch, train_part, _val_for_partition(valset, cfg.partition, label),
                              cfg.teacher, width=cfg.width, role=f"teacher-{label}")
    rel = _save_model(cfg, model, "teacher", label, hist.best_iter)
    hist.write_csv(_hist_path(cfg, "teacher", label))
    return label, rel, hist.best_val_miou, hist.best_iter


def _run_jobs(fn, jobs: int, arglists):
    if jobs <= 1:
        return [fn(*a) for a in arglists]
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        futures = [ex.submit(fn, *a) for a in arglists]
        return [f.result() for f in futures]


def cmd_train_teachers(cfg, args) -> str:
    parts = partition_dataset(_dataset(cfg, "train"), cfg.partition)
    valset = _dataset(cfg, "val")
    for lab in cfg.partition.labels:
        if len(parts[lab]) == 0:
            raise CliError(f"partition {lab!r} has no training samples; adjust the CAR thresholds "
                           f"{cfg.partition.thresholds}")
    results = _run_jobs(_teacher_job, args.jobs,
                        [(cfg, lab, parts[lab], valset) for lab in cfg.partition.labels])
    _record(cfg, "teacher", {lab: rel for lab, rel, _, _ in results},
            thresholds=list(cfg.partition.thresholds))
    return "teachers: " + ", ".join(f"{lab} val mIoU {m:.4f}@{it}" for lab, _, m, it in results)


def cmd_train_student(cfg, args) -> str:
    loader = _Loader(cfg)
    m_o = loader.load("original", "full")
    teachers = loader.teachers()
    student, hist = train_student_mtkd(m_o, teachers, cfg.partition, _dataset(cfg, "train"),
                                       _dataset(cfg, "val"), cfg.student)
    rel = _save_model(cfg, student, "student", "full", hist.best_iter)
    hist.write_csv(_hist_path(cfg, "student", "full"))
    _write_csv(cfg.out_dir / "history" / "student-teacher-choices.csv", ["iter", "id", "teacher"],
               hist.teacher_choices)
    _record(cfg, "student", {"full": rel}, **{"lambda": cfg.student.lam})
    return (f"student (lambda={cfg.student.lam:g}): best val mIoU {hist.best_val_miou:.4f} "
            f"at iter {hist.best_iter} -> {rel}")


def _lambda_job(cfg, lam, m_o, teachers, trainset, valset, iters):
    _, table = lambda_search([lam], m_o, teachers, cfg.partition, trainset, valset, cfg.student,
                             max_iters=iters)
    return table[0]


def cmd_lambda_search(cfg, args) -> str:
    loader = _Loader(cfg)
    m_o = loader.load("original", "full")
    teachers = loader.teachers()
    trainset, valset = _dataset(cfg, "train"), _dataset(cfg, "val")
    iters = cfg.lambda_search_iters or None
    lams = sorted({float(v) for v in cfg.lambda_grid})
    rows = _run_jobs(_lambda_job, args.jobs,
                     [(cfg, lam, m_o, teachers, trainset, valset, iters) for lam in lams])
    best = max(rows, key=lambda r: (r["val_mIoU"], -r["lambda"]))
    _write_csv(cfg.out_dir / "lambda-search.csv", ["lambda", "val_mIoU", "best_iter", "max_iters", "selected"],
               [(_fmt(r["lambda"]), _fmt(r["val_mIoU"]), r["best_iter"], r["max_iters"],
                 int(r is best)) for r in rows])
    return f"lambda search over {len(rows)} values: best lambda={best['lambda']:g} (val mIoU {best['val_mIoU']:.4f})"


# ---------------------------------------------------------------- inference and reports


def _infer(cfg: ExperimentConfig, mode: str, ds: Dataset):
    """Predicted masks for ``ds`` plus routing records (op mode only)."""
    loader = _Loader(cfg)
    records: list[RoutingRecord] = []
    if mode == "original":
        preds = predict_dataset(loader.load("original", "full"), ds, cfg.threshold)
    elif mode == "mtkd":
        preds = predict_dataset(loader.load("student", "full"), ds, cfg.threshold)
    else:
        m_o = loader.load("original", "full")
        teachers = loader.teachers()
        preds = []
        for s in ds:
            mask, rec = route_and_predict(m_o, teachers, cfg.partition, s, cfg.threshold)
            preds.append(mask)
            records.append(rec)
    log.info("infer --mode %s loaded %d checkpoint(s)", mode, loader.count)
    return preds, records, loader.count


def cmd_infer(cfg, args) -> str:
    ds = _dataset(cfg, args.split)
    preds, records, n = _infer(cfg, args.mode, ds)
    base = cfg.out_dir / "infer" / args.mode
    (base / "pred").mkdir(parents=True, exist_ok=True)
    for s, p in zip(ds, preds):
        Image.fromarray(p * 255, "L").save(base / "pred" / f"{s.id}.png")
    if records:
        write_routing_csv(records, base / "routing.csv")
    return f"infer --mode {args.mode}: {len(preds)} masks from {n} checkpoint(s) -> {base}"


def _write_reports(base: Path, report, k: int) -> None:
    _write_csv(base / "metrics.csv", ["id", "car", *ROW_KEYS],
               [(r["id"], _fmt(r["car"]), *(_fmt(r[key]) for key in ROW_KEYS)) for r in report.rows])
    _write_json(base / "summary.json", report.summary())
    _write_partitions(base / "partitions.csv", report.rows, k)


def _write_partitions(path: Path, rows, k: int) -> list[dict]:
    table = partition_report(rows, k)
    _write_csv(path, ["partition", "count", "car_min", "car_max", "mIoU"],
               [(t["partition"], t["count"], _fmt(t["car_min"]), _fmt(t["car_max"]), _fmt(t["mIoU"]))
                for t in table])
    return table


def cmd_evaluate(cfg, args) -> str:
    ds = _dataset(cfg, args.split)
    preds, records, n = _infer(cfg, args.mode, ds)
    report = dataset_metrics(((s.label, p, s.id) for s, p in zip(ds, preds)), cfg.zero_division)
    base = cfg.out_dir / "eval" / args.mode
    _write_reports(base, report, args.k)
    if records:
        write_routing_csv(records, base / "routing.csv")
    agg = report.aggregate
    return f"evaluate --mode {args.mode}: " + " ".join(f"{key}={agg[key]:.4f}" for key in MEAN_KEYS)


def _read_metrics(path: Path) -> list[dict]:
    if not path.is_file():
        raise CliError(f"{path} not found; run evaluate first")
    with open(path, newline="") as fh:
        return [{"id": r["id"], "car": float(r["car"]), "mIoU": float(r["mIoU"])} for r in csv.DictReader(fh)]


def cmd_report_partitions(cfg, args) -> str:
    base = cfg.out_dir / "eval" / args.mode
    table = _write_partitions(base / "partitions.csv", _read_metrics(base / "metrics.csv"), args.k)
    return f"{args.mode}: " + ", ".join(f"P{t['partition']} mIoU {t['mIoU']:.4f}" for t in table)


def _read_routing(path: Path) -> list[RoutingRecord]:
    if not path.is_file():
        raise CliError(f"{path} not found; run evaluate --mode op first")
    with open(path, newline="") as fh:
        return [RoutingRecord(r["id"], float(r["est_car"]), float(r["gt_car"]), r["chosen_part"], r["gt_part"])
                for r in csv.DictReader(fh)]


def cmd_report_routing(cfg, args) -> str:
    base = cfg.out_dir / "eval" / "op"
    records = _read_routing(base / "routing.csv")
    for r in records:
        if r.chosen not in cfg.partition.labels or r.gt_partition not in cfg.partition.labels:
            raise CliError(f"routing.csv labels do not match partition labels {cfg.partition.labels}")
    conf = routing_confusion(records, cfg.partition)
    write_confusion_csv(conf, base / "confusion.csv")
    write_car_distribution_csv(records, base / "car-distribution.csv", args.bins)
    return f"routing accuracy {conf.accuracy:.4f} over {len(records)} samples"


def grad_check_models(arch: str, seed: int, width: int = 8, size: int = 8,
                      max_elements: int = 64) -> GradCheckReport:
    """Gradient check of the BCE loss over every parameter tensor of ``arch`` on one input pair.

    Coordinates straddling a kink or below floating-point resolution are
    counted in the report instead of compared.
    """
    model = M.build_model(arch, width, seed).astype(np.float64)
    rng = np.random.default_rng(seed)
    x1 = rng.random((1, 3, size, size))
    x2 = rng.random((1, 3, size, size))
    y = (rng.random((1, 1, size, size)) < 0.3).astype(np.float64)
    names = sorted(model.params)

    def loss(*arrays):
        params = dict(zip(names, arrays))
        return T.bce_loss(M.forward(model, x1, x2, params=params), y)

    return grad_check_report(loss, [model.params[n] for n in names], max_elements=max_elements,
                             seed=seed, skip_kinks=True, skip_unresolved=True)


def cmd_grad_check(cfg, args) -> str:
    reports = {}
    for arch in (cfg.arch,) if not args.all_archs else M.ARCHS:
        reports[arch] = grad_check_models(arch, cfg.seed, width=cfg.width)
    worst = max(r.max_rel_error for r in reports.values())
    ok = worst <= GRAD_TOL
    _write_json(cfg.out_dir / "gradcheck.json", {
        "tolerance": GRAD_TOL, "passed": ok,
        "archs": {k: {"max_rel_error": float(r.max_rel_error), "checked": r.checked,
                      "skipped_kinks": r.skipped_kinks, "unresolved": r.unresolved}
                  for k, r in reports.items()}})
    msg = f"grad-check max relative error {worst:.3e} ({'PASS' if ok else 'FAIL'} at {GRAD_TOL:g})"
    if not ok:
        raise CliError(msg)
    return msg


def _has_original(cfg: ExperimentConfig) -> bool:
    """True when models.json lists an original checkpoint matching the config's model."""
    rel = _read_index(cfg).get("original", {}).get("checkpoints", {}).get("full")
    if rel is None or not (cfg.out_dir / rel).is_file():
        return False
    model = M.load_checkpoint(cfg.out_dir / rel)
    if (model.arch, model.width) != (cfg.arch, cfg.width):
        raise CliError(f"{rel} is {model.arch}/w{model.width}, config asks for {cfg.arch}/w{cfg.width}")
    return True


def cmd_pipeline(cfg, args) -> str:
    """gen-data (synthetic only), train-original, partition, train-teachers, train-student, evaluate x3."""
    if cfg.data.root is None:
        cmd_gen_data(cfg, args)
    if not (args.reuse_original and _has_original(cfg)):
        cmd_train_original(cfg, args)
    cmd_partition(cfg, args)
    cmd_train_teachers(cfg, args)
    cmd_train_student(cfg, args)
    results = {}
    for mode in MODES:
        args.mode = mode
        cmd_evaluate(cfg, args)
        results[mode] = json.loads((cfg.out_dir / "eval" / mode / "summary.json").read_text())["mean"]["mIoU"]
    cmd_report_routing(cfg, args)
    _write_comparison(cfg, args.k)
    return "pipeline test mIoU " + " ".join(f"{m}={v:.4f}" for m, v in results.items())


def _write_comparison(cfg: ExperimentConfig, k: int) -> None:
    tables = {m: partition_report(_read_metrics(cfg.out_dir / "eval" / m / "metrics.csv"), k) for m in MODES}
    rows = []
    for i, ref in enumerate(tables["original"]):
        rows.append((ref["partition"], ref["count"], _fmt(ref["car_min"]), _fmt(ref["car_max"]),
                     *(_fmt(tables[m][i]["mIoU"]) for m in MODES)))
    _write_csv(cfg.out_dir / "eval" / "comparison.csv",
               ["partition", "count", "car_min", "car_max", *(f"mIoU_{m}" for m in MODES)], rows)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "compute-car": cmd_compute_car,
    "partition": cmd_partition,
    "train-original": cmd_train_original,
    "train-teachers": cmd_train_teachers,
    "train-student": cmd_train_student,
    "lambda-search": cmd_lambda_search,
    "infer": cmd_infer,
    "evaluate": cmd_evaluate,
    "report-partitions": cmd_report_partitions,
    "report-routing": cmd_report_routing,
    "grad-check": cmd_grad_check,
    "pipeline": cmd_pipeline,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment config file")
    common.add_argument("--seed", type=int, help="override [experiment] seed")
    common.add_argument("--out", help="override [experiment] out")

    parser = argparse.ArgumentParser(prog="mtkd", description="CAR-partitioned change detection experiments")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or "").split("\n")[0] or None)
        if name in ("train-teachers", "lambda-search", "pipeline"):
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        if name in ("compute-car", "infer", "evaluate"):
            p.add_argument("--split", choices=SPLITS, default="train" if name == "compute-car" else "test")
        if name in ("infer", "evaluate"):
            p.add_argument("--mode", choices=MODES, required=True)
        if name in ("report-partitions",):
            p.add_argument("--mode", choices=MODES, default="mtkd")
        if name in ("evaluate", "report-partitions", "pipeline"):
            p.add_argument("--k", type=int, default=5, help="number of CAR partitions in partitions.csv")
        if name in ("report-routing", "pipeline"):
            p.add_argument("--bins", type=int, default=10, help="CAR histogram bins")
        if name == "grad-check":
            p.add_argument("--all-archs", action="store_true", help="check every architecture")
        if name == "pipeline":
            p.add_argument("--reuse-original", action="store_true",
                           help="keep an existing original-model checkpoint instead of retraining it")
            p.set_defaults(split="test")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out)
        if getattr(args, "jobs", 1) < 1:
            raise CliError("--jobs must be >= 1")
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        if not os.access(cfg.out_dir, os.W_OK):
            raise CliError(f"output directory {cfg.out_dir} is not writable")
        summary = COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        parser.print_usage(sys.stderr)
        print(f"mtkd: config error: {exc}", file=sys.stderr)
        return 2
    except (CliError, FileNotFoundError, ValueError, KeyError, FloatingPointError) as exc:
        print(f"mtkd {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(summary)
    return 0


def main() -> None:
    level = os.environ.get("MTKD_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
