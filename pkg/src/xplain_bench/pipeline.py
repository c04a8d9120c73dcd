"""Experiment orchestration over the image x method x augmentation grid."""
from __future__ import annotations

import csv
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .attribution import METHOD_LABELS, METHODS, explain
from .augment import KINDS, AugmentationInterval
from .corpus import (
    FIXTURE_MEAN, FIXTURE_SPEC, FIXTURE_STD, CLASS_NAMES, Corpus, filter_correct,
    generate_synthetic_corpus, load_corpus,
)
from .metrics import (
    CurveSet, MetricConfig, build_curves, calibrate_interval, curve_score,
    pixel_flip_curve, pixel_flip_score, s_ratio,
)
from .nn import ModelGraph, accuracy, load_model, random_model, train_fixture

log = logging.getLogger(__name__)

FAILURE_LIMIT = 0.10


@dataclass
class RunConfig:
    model_path: str | None = None
    corpus_dir: str | None = None
    synthetic: int | None = None
    methods: tuple = METHODS
    kinds: tuple = KINDS
    intervals: str | dict = "default"  # "default" | "calibrate" | {kind: (low, high)}
    metric: MetricConfig = field(default_factory=MetricConfig)
    samples: int = 21
    out_dir: str | None = None
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not self.methods or not self.kinds:
            raise ValueError("need at least one method and one augmentation kind")
        for m in self.methods:
            if m not in METHODS:
                raise ValueError(f"unknown method {m!r}")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown augmentation {k!r}")
        if (self.corpus_dir is None) == (self.synthetic is None):
            raise ValueError("give exactly one of corpus_dir or synthetic")
        if self.samples < 3 or self.samples % 2 == 0:
            raise ValueError("samples must be odd and >= 3")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    def echo(self) -> dict:
        """Config fields that determine results (worker count excluded)."""
        d = asdict(self)
        d.pop("workers")
        d.pop("out_dir")
        d["methods"], d["kinds"] = list(self.methods), list(self.kinds)
        return d


@dataclass
class EvaluationRecord:
    image_id: str
    method: str
    augmentation: str
    probability_score: float
    correlation_score: float
    top1000_score: float
    s_correlation: float
    s_top1000: float
    skipped_correlation: int = 0
    skipped_top1000: int = 0


@dataclass
class Report:
    records: list = field(default_factory=list)
    pixel_flip: list = field(default_factory=list)  # (image_id, method, score)
    baseline: list = field(default_factory=list)  # (image_id, score)
    curves: dict = field(default_factory=dict)  # (image_id, method, kind) -> CurveSet
    intervals: dict = field(default_factory=dict)  # kind -> dict
    failures: list = field(default_factory=list)  # (image_id, method, kind, message)
    kept: int = 0
    total: int = 0
    cells: int = 0
    config: dict = field(default_factory=dict)

    @property
    def failure_rate(self) -> float:
        return len(self.failures) / self.cells if self.cells else 0.0


# ---------------------------------------------------------------------------
# fixtures
# ---------------------------------------------------------------------------

def build_fixture_model(seed=0, n=200, size=32, epochs=20, learning_rate=0.05):
    """Train the synthetic-shapes fixture CNN. Returns (model, corpus, train accuracy)."""
    corpus = generate_synthetic_corpus(seed, n, size, size)
    init = random_model(FIXTURE_SPEC, (3, size, size), len(CLASS_NAMES), seed=seed,
                        mean=FIXTURE_MEAN, std=FIXTURE_STD)
    model = train_fixture(init, corpus.images, corpus.labels, epochs=epochs,
                          learning_rate=learning_rate, seed=seed)
    return model, corpus, accuracy(model, corpus.images, corpus.labels)


# ---------------------------------------------------------------------------
# cell evaluation (runs in worker processes)
# ---------------------------------------------------------------------------

_STATE: dict = {}


def _init_worker(model, images, labels, intervals, metric):
    _STATE.update(model=model, images=images, labels=labels, intervals=intervals, metric=metric)


def _run_cell(key):
    image_id, method, kind = key
    model, metric = _STATE["model"], _STATE["metric"]
    interval = _STATE["intervals"][kind]
    try:
        curves = build_curves(model, _STATE["images"][image_id], _STATE["labels"][image_id],
                              method, interval, metric)
        prob = curve_score(curves.probability, interval.low, interval.high)
        corr = curve_score(curves.correlation, interval.low, interval.high)
        top = curve_score(curves.top1000, interval.low, interval.high)
        record = EvaluationRecord(image_id, method, kind, prob, corr, top,
                                  s_ratio(corr, prob), s_ratio(top, prob),
                                  len(curves.skipped_correlation), len(curves.skipped_top1000))
        return key, record, curves, None
    except (ValueError, ArithmeticError, AssertionError) as exc:
        return key, None, None, f"{type(exc).__name__}: {exc}"


def _run_flip(key):
    image_id, method = key
    model, metric = _STATE["model"], _STATE["metric"]
    image, label = _STATE["images"][image_id], _STATE["labels"][image_id]
    try:
        if method == "random":
            heat = np.random.default_rng(_STATE["flip_seeds"][image_id]).random(image.shape[:2])
        else:
            heat = explain(model, image, label, method).heatmap
        return key, pixel_flip_score(pixel_flip_curve(model, image, heat, label, metric), metric), None
    except (ValueError, ArithmeticError) as exc:
        return key, None, f"{type(exc).__name__}: {exc}"


def _map(fn, keys, workers, initargs, flip_seeds):
    if workers == 1:
        _init_and_seed(initargs, flip_seeds)
        return [fn(k) for k in keys]
    with ProcessPoolExecutor(max_workers=workers, initializer=_init_and_seed,
                             initargs=(initargs, flip_seeds)) as pool:
        return list(pool.map(fn, keys, chunksize=max(1, len(keys) // (4 * workers))))


def _init_and_seed(initargs, flip_seeds):
    _init_worker(*initargs)
    _STATE["flip_seeds"] = flip_seeds


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------

def resolve_intervals(config: RunConfig, model, corpus: Corpus) -> dict:
    out = {}
    for kind in config.kinds:
        if config.intervals == "calibrate":
            cal = calibrate_interval(model, corpus.pairs(), kind, config.metric, config.samples)
            out[kind] = (cal.interval, {"calibrated": True, "warning": cal.warning,
                                        "drop_low": cal.drop_low, "drop_high": cal.drop_high})
        elif config.intervals == "default":
            out[kind] = (AugmentationInterval.default(kind, config.samples), {"calibrated": False})
        else:
            low, high = config.intervals[kind]
            out[kind] = (AugmentationInterval(kind, float(low), float(high), config.samples),
                         {"calibrated": False})
    return out


def run_evaluation(config: RunConfig, model: ModelGraph | None = None,
                   corpus: Corpus | None = None) -> Report:
    """Evaluate every (image, method, augmentation) cell.

    ``model`` / ``corpus`` override the paths in ``config`` (used by tests
    and the fixture workflow).
    """
    if model is None:
        model = load_model(config.model_path)
    if corpus is None:
        c, h, w = model.input_shape
        if config.synthetic is not None:
            corpus = generate_synthetic_corpus(config.seed, config.synthetic, h, w)
        else:
            corpus = load_corpus(config.corpus_dir, (h, w))
    kept = filter_correct(model, corpus)
    if len(kept) == 0:
        raise ValueError("no correctly classified images to evaluate")

    resolved = resolve_intervals(config, model, kept)
    intervals = {k: iv for k, (iv, _) in resolved.items()}
    images = {e.id: e.image for e in kept}
    labels = {e.id: e.label for e in kept}
    ids = sorted(images)
    flip_seeds = {img: [config.seed, i] for i, img in enumerate(ids)}
    initargs = (model, images, labels, intervals, config.metric)

    cell_keys = [(i, m, k) for i in ids for m in config.methods for k in config.kinds]
    flip_keys = [(i, m) for i in ids for m in config.methods] + [(i, "random") for i in ids]
    cells = _map(_run_cell, cell_keys, config.workers, initargs, flip_seeds)
    flips = _map(_run_flip, flip_keys, config.workers, initargs, flip_seeds)

    report = Report(kept=len(kept), total=kept.total, cells=len(cell_keys), config=config.echo())
    for kind, (iv, meta) in resolved.items():
        report.intervals[kind] = {"low": iv.low, "high": iv.high, "samples": iv.samples, **meta}
    for key, record, curves, err in sorted(cells, key=lambda c: c[0]):
        if err is None:
            report.records.append(record)
            report.curves[key] = curves
        else:
            log.warning("cell %s failed: %s", key, err)
            report.failures.append((*key, err))
    for (image_id, method), score, err in sorted(flips, key=lambda c: c[0]):
        if err is not None:
            log.warning("pixel flip %s/%s failed: %s", image_id, method, err)
            report.failures.append((image_id, method, "pixel_flip", err))
        elif method == "random":
            report.baseline.append((image_id, score))
        else:
            report.pixel_flip.append((image_id, method, score))
    return report


# ---------------------------------------------------------------------------
# aggregation and output
# ---------------------------------------------------------------------------

def mean_sem(values):
    values = [v for v in values if v is not None and math.isfinite(v)]
    n = len(values)
    if n == 0:
        return {"mean": None, "sem": None, "n": 0}
    arr = np.asarray(values, dtype=np.float64)
    sem = float(arr.std(ddof=1) / math.sqrt(n)) if n > 1 else None
    return {"mean": float(arr.mean()), "sem": sem, "n": n}


def summarize(report: Report) -> dict:
    methods = [m for m in METHODS if m in report.config.get("methods", METHODS)]
    kinds = [k for k in KINDS if k in report.config.get("kinds", KINDS)]
    table = {"s_correlation": {}, "s_top1000": {}, "probability_score": {}}
    for metric in table:
        for m in methods:
            table[metric][m] = {
                k: mean_sem([getattr(r, metric) for r in report.records
                             if r.method == m and r.augmentation == k])
                for k in kinds
            }
    skips = {
        "correlation_samples": sum(r.skipped_correlation for r in report.records),
        "top1000_samples": sum(r.skipped_top1000 for r in report.records),
        "failed_cells": len([f for f in report.failures if f[2] != "pixel_flip"]),
        "failed_pixel_flip": len([f for f in report.failures if f[2] == "pixel_flip"]),
    }
    return {
        "version": __version__,
        "config": report.config,
        "images": {"kept": report.kept, "total": report.total},
        "intervals": report.intervals,
        "methods": {m: METHOD_LABELS[m] for m in methods},
        "augmentations": kinds,
        "tables": table,
        "pixel_flip": {m: mean_sem([s for _, mm, s in report.pixel_flip if mm == m]) for m in methods},
        "pixel_flip_random_baseline": mean_sem([s for _, s in report.baseline]),
        "skips": skips,
        "failure_rate": report.failure_rate,
    }


def _f(v):
    return "" if v is None else repr(float(v))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


RECORD_FIELDS = [f for f in EvaluationRecord.__dataclass_fields__]


def emit_report(report: Report, directory) -> list[Path]:
    """Write records.csv, pixel_flip.csv, failures.csv, table_s_correlation.csv,
    summary.json and per-cell curves/*.csv. Returns the written paths."""
    out = Path(directory)
    (out / "curves").mkdir(parents=True, exist_ok=True)
    written = []

    rows = []
    for r in report.records:
        row = []
        for name in RECORD_FIELDS:
            v = getattr(r, name)
            row.append(_f(v) if isinstance(v, float) else v)
        rows.append(row)
    _write_csv(out / "records.csv", RECORD_FIELDS, rows)
    written.append(out / "records.csv")

    flips = [(i, m, _f(s)) for i, m, s in report.pixel_flip] + [(i, "random", _f(s)) for i, s in report.baseline]
    _write_csv(out / "pixel_flip.csv", ["image_id", "ordering", "score"], sorted(flips))
    _write_csv(out / "failures.csv", ["image_id", "method", "augmentation", "error"], report.failures)
    written += [out / "pixel_flip.csv", out / "failures.csv"]

    summary = summarize(report)
    kinds = summary["augmentations"]
    header = ["method"] + [c for k in kinds for c in (k, f"{k}_sem")]
    table_rows = []
    for m, cells in summary["tables"]["s_correlation"].items():
        table_rows.append([METHOD_LABELS[m]] + [_f(cells[k][f]) for k in kinds for f in ("mean", "sem")])
    _write_csv(out / "table_s_correlation.csv", header, table_rows)
    written.append(out / "table_s_correlation.csv")

    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    written.append(out / "summary.json")

    for (image_id, method, kind), cs in sorted(report.curves.items()):
        path = out / "curves" / f"{image_id}__{method}__{kind}.csv"
        _write_csv(path, ["param", "probability", "correlation", "top1000"], _curve_rows(cs))
        written.append(path)
    return written


def _curve_rows(cs: CurveSet):
    corr = dict(zip(cs.correlation.params.tolist(), cs.correlation.values.tolist()))
    top = dict(zip(cs.top1000.params.tolist(), cs.top1000.values.tolist()))
    return [[_f(p), _f(v), _f(corr.get(p)), _f(top.get(p))]
            for p, v in zip(cs.probability.params.tolist(), cs.probability.values.tolist())]
