"""``xplain-bench`` command line.

Exit codes: 0 success, 1 configuration error, 2 more than 10% of cells
failed, 3 I/O error. Log level comes from the XPLAIN_LOG environment
variable (default WARNING).

Augmentation parameter units: Brightness and Saturation add to the 0..255
V / S channel; Hue is in byte-hue units (1 unit = 2 degrees); Rotate in
degrees; Scale is a factor; Translate a fraction of the image side.

Calibration scans 20 log-spaced magnitudes from max/50 up to a per-kind
maximum: Brightness 128, Hue 90, Saturation 128, Rotate 45, Scale 1.5
(interval [1/s, s]), Translate 0.25.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attribution import METHODS, explain, heatmap_to_png, save_explanation_bin
from .augment import KINDS
from .corpus import generate_synthetic_corpus, load_corpus, write_corpus
from .metrics import MetricConfig, calibrate_interval
from .nn import ModelError, load_model, predict, save_model
from .pipeline import FAILURE_LIMIT, RunConfig, build_fixture_model, emit_report, run_evaluation

log = logging.getLogger("xplain_bench")

EXIT_OK, EXIT_CONFIG, EXIT_PARTIAL, EXIT_IO = 0, 1, 2, 3


def _csv_list(text, allowed):
    items = [t.strip() for t in text.split(",") if t.strip()]
    if items == ["all"]:
        return tuple(allowed)
    bad = [t for t in items if t not in allowed]
    if bad:
        raise argparse.ArgumentTypeError(f"unknown: {', '.join(bad)} (choose from {', '.join(allowed)})")
    return tuple(items)


def _add_source(p):
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--corpus", help="directory with PNGs and labels.csv")
    src.add_argument("--synthetic", type=int, metavar="N", help="generate N synthetic images")


def _metric_args(p):
    p.add_argument("--topk", type=int, default=1000)
    p.add_argument("--flip-fraction", type=float, default=0.2)
    p.add_argument("--flip-steps", type=int, default=20)
    p.add_argument("--drop", type=float, default=0.10, help="calibration drop threshold")


def _metric_config(a):
    return MetricConfig(a.topk, a.flip_fraction, a.flip_steps, a.drop)


def build_parser():
    parser = argparse.ArgumentParser(prog="xplain-bench", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate explanation robustness")
    run.add_argument("--model", required=True)
    _add_source(run)
    run.add_argument("--methods", type=lambda t: _csv_list(t, METHODS), default=METHODS)
    run.add_argument("--augs", type=lambda t: _csv_list(t, KINDS), default=KINDS)
    run.add_argument("--intervals", default="default",
                     help="'default' (built-in reference intervals), 'calibrate', or a JSON file {kind: [low, high]}")
    run.add_argument("--samples", type=int, default=21)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--out", required=True)
    _metric_args(run)

    cal = sub.add_parser("calibrate", help="find augmentation intervals for a model")
    cal.add_argument("--model", required=True)
    _add_source(cal)
    cal.add_argument("--augs", type=lambda t: _csv_list(t, KINDS), default=KINDS)
    cal.add_argument("--samples", type=int, default=21)
    cal.add_argument("--seed", type=int, default=0)
    cal.add_argument("--out", help="write intervals JSON here (usable as --intervals)")
    _metric_args(cal)

    exp = sub.add_parser("export-model", help="train the synthetic fixture CNN and write .xbw")
    exp.add_argument("--out", required=True)
    exp.add_argument("--n", type=int, default=200)
    exp.add_argument("--size", type=int, default=32)
    exp.add_argument("--epochs", type=int, default=20)
    exp.add_argument("--lr", type=float, default=0.05)
    exp.add_argument("--seed", type=int, default=0)
    exp.add_argument("--corpus-out", help="also write the training corpus here")

    ex = sub.add_parser("explain", help="explain one image")
    ex.add_argument("--model", required=True)
    ex.add_argument("--image", required=True)
    ex.add_argument("--method", choices=METHODS, required=True)
    ex.add_argument("--class", dest="target", type=int, help="target class (default: predicted)")
    ex.add_argument("--out", required=True, help="output prefix; writes <out>.png and <out>.bin")
    return parser


def _corpus(a, model):
    c, h, w = model.input_shape
    if a.synthetic is not None:
        return generate_synthetic_corpus(a.seed, a.synthetic, h, w)
    return load_corpus(a.corpus, (h, w))


def cmd_run(a):
    intervals = a.intervals
    if intervals not in ("default", "calibrate"):
        intervals = {k: tuple(v) for k, v in json.loads(Path(intervals).read_text()).items()}
    config = RunConfig(model_path=a.model, corpus_dir=a.corpus, synthetic=a.synthetic,
                       methods=a.methods, kinds=a.augs, intervals=intervals,
                       metric=_metric_config(a), samples=a.samples, out_dir=a.out,
                       workers=a.workers, seed=a.seed)
    report = run_evaluation(config)
    emit_report(report, a.out)
    print(f"{len(report.records)} records from {report.kept}/{report.total} images -> {a.out}")
    if report.failure_rate > FAILURE_LIMIT:
        print(f"{len(report.failures)} of {report.cells} cells failed", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_calibrate(a):
    from .corpus import filter_correct

    model = load_model(a.model)
    corpus = filter_correct(model, _corpus(a, model))
    if len(corpus) == 0:
        raise ValueError("no correctly classified images")
    out = {}
    for kind in a.augs:
        cal = calibrate_interval(model, corpus.pairs(), kind, _metric_config(a), a.samples)
        flag = "  (WARNING: drop not reached)" if cal.warning else ""
        print(f"kind={kind} low={cal.interval.low!r} high={cal.interval.high!r} "
              f"drop_low={cal.drop_low:.4f} drop_high={cal.drop_high:.4f}{flag}")
        out[kind] = [cal.interval.low, cal.interval.high]
    if a.out:
        Path(a.out).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_export(a):
    model, corpus, acc = build_fixture_model(a.seed, a.n, a.size, a.epochs, a.lr)
    save_model(model, a.out)
    if a.corpus_out:
        write_corpus(corpus, a.corpus_out)
    print(f"training accuracy {acc:.3f}; wrote {a.out}")
    return EXIT_OK


def cmd_explain(a):
    from PIL import Image

    model = load_model(a.model)
    with Image.open(a.image) as im:
        image = np.asarray(im.convert("RGB"), dtype=np.uint8)
    target = int(predict(model, [image])[0]) if a.target is None else a.target
    expl = explain(model, image, target, a.method)
    heatmap_to_png(expl.heatmap, f"{a.out}.png")
    save_explanation_bin(expl, f"{a.out}.bin")
    print(f"class {target}: wrote {a.out}.png and {a.out}.bin")
    return EXIT_OK


COMMANDS = {"run": cmd_run, "calibrate": cmd_calibrate, "export-model": cmd_export, "explain": cmd_explain}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("XPLAIN_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        return COMMANDS[a.command](a)
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, ModelError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
