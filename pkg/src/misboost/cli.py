"""Command-line interface: train, predict, cv, inspect and report.

Exit codes: 0 success, 1 runtime or data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .base_learner import FitConfig
from .boosting import (ModelFormatError, TrainConfig, decision_function, load_model,
                       predict_multiclass, save_model, train, train_one_vs_all)
from .data import DataError, load_dataset
from .evaluation import (EvalReport, cross_validate, inspect_prototypes, inspection_markdown,
                         merge_reports, prototype_counts_markdown)

log = logging.getLogger("misboost")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _available_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def _positive_int(s):
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {v}")
    return v


def _positive_float(s):
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {s!r}") from None
    if not (np.isfinite(v) and v > 0):
        raise argparse.ArgumentTypeError(f"must be a positive finite number, got {s}")
    return v


def _int(s):
    try:
        return int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {s!r}") from None


def _add_common(p, data=True, model=False, out_help="output path"):
    if data:
        p.add_argument("--data", required=True, help="dataset file")
        p.add_argument("--format", choices=["mil-csv", "mil-sparse"], default="mil-csv")
    if model:
        p.add_argument("--model", required=True,
                       help="model file, or a directory of one-vs-all models")
    p.add_argument("--out", help=out_help)
    p.add_argument("--verbose", "-v", action="count", default=0)


def _add_train_options(p):
    p.add_argument("--k", type=_positive_int, default=100, help="k-means restarts per stage")
    p.add_argument("--max-m", type=_positive_int, default=100, help="largest ensemble size tried")
    p.add_argument("--sel-folds", type=_positive_int, default=4,
                   help="folds for ensemble-size selection")
    p.add_argument("--alpha", type=_positive_float, default=None,
                   help="fixed soft-min sharpness (default: scaled to the data)")
    p.add_argument("--tol", type=_positive_float, default=1e-5,
                   help="coordinate-descent stopping tolerance")
    p.add_argument("--seed", type=_int, default=0)
    p.add_argument("--jobs", type=_positive_int, default=_available_cpus(),
                   help="worker processes (default: available processors)")
    p.add_argument("--restricted", action="store_true",
                   help="confine prototypes to training instances")
    p.add_argument("--no-normalize", action="store_true", help="skip feature standardization")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="misboost", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("train", help="train a model (one per class for multiclass data)")
    _add_common(p, out_help="model file (a directory for multiclass data)")
    _add_train_options(p)

    p = sub.add_parser("predict", help="write bag_id,predicted_label,margin rows")
    _add_common(p, model=True, out_help="CSV output (default: standard output)")

    p = sub.add_parser("cv", help="cross-validate the training procedure")
    _add_common(p, out_help="JSON report; the markdown table goes next to it with suffix .md")
    _add_train_options(p)
    p.add_argument("--folds", type=_positive_int, default=10)
    p.add_argument("--ap", action="store_true", help="add average precision of held-out margins")

    p = sub.add_parser("inspect", help="nearest instance per bag for the first prototypes")
    p.add_argument("--data", help="dataset file (omit for a per-class summary only)")
    p.add_argument("--format", choices=["mil-csv", "mil-sparse"], default="mil-csv")
    p.add_argument("--model", required=True, help="model file or one-vs-all model directory")
    p.add_argument("--top", type=_positive_int, default=3, help="number of prototypes")
    p.add_argument("--out", help="output path (default: standard output)")
    p.add_argument("--verbose", "-v", action="count", default=0)

    p = sub.add_parser("report", help="merge evaluation reports into one comparison table")
    p.add_argument("reports", nargs="+", help="JSON reports written by cv")
    p.add_argument("--out", help="output path (default: standard output)")
    p.add_argument("--verbose", "-v", action="count", default=0)
    return parser


def train_config(args) -> TrainConfig:
    """Build the training configuration; invalid combinations are usage errors."""
    try:
        cfg = TrainConfig(
            k=args.k, max_stages=args.max_m, selection_folds=args.sel_folds, alpha=args.alpha,
            fit=FitConfig(tol=args.tol), seed=args.seed, restricted_mode=args.restricted,
            normalize=not args.no_normalize, jobs=args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _emit(text: str, out):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


# ---------------------------------------------------------------------------
# one-vs-all model directories


def _class_file(index: int, name: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in name)
    return f"class{index:03d}_{safe}.json"


def save_model_dir(models, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    for name, model in models:
        save_model(model, out / _class_file(model.metadata["class_index"], name))


def load_models(path):
    """``[(class_name, model)]`` from a directory, or ``None`` for a single model file."""
    path = Path(path)
    if not path.is_dir():
        return None
    models = []
    for f in sorted(path.glob("*.json")):
        m = load_model(f)
        if "class_index" not in m.metadata:
            raise ModelFormatError(f"{f}: not a one-vs-all model (no class index)")
        models.append((m.metadata.get("class_name", f.stem), m))
    if not models:
        raise ModelFormatError(f"{path}: no model files")
    models.sort(key=lambda nm: nm[1].metadata["class_index"])
    return models


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = train_config(args)
    if not args.out:
        raise UsageError("train needs --out")
    ds = load_dataset(args.data, args.format)
    if ds.is_multiclass:
        models = train_one_vs_all(ds, cfg)
        save_model_dir(models, args.out)
        correct = sum(predict_multiclass(models, b)[0] == b.label for b in ds)
        print(f"trained {len(models)} one-vs-all models into {args.out}")
        print(prototype_counts_markdown(models), end="")
        print(f"training accuracy: {correct / len(ds):.4f}")
        return EXIT_OK
    model = train(ds, cfg)
    save_model(model, args.out)
    margins = decision_function(model, ds)
    acc = float(np.mean(np.where(margins >= 0, 1, -1) == ds.labels()))
    curve = model.metadata["validation_curve"]
    print(f"selected stages (M*): {model.n_stages}")
    print(f"training accuracy: {acc:.4f}")
    print(f"validation error: first {curve[0]:.4f}, min {min(curve):.4f}, last {curve[-1]:.4f} "
          f"over {len(curve)} stages")
    print(f"model written to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ds = load_dataset(args.data, args.format)
    models = load_models(args.model)
    buf = io.StringIO()
    if models is None:
        model = load_model(args.model)
        margins = decision_function(model, ds)
        buf.write("bag_id,predicted_label,margin\n")
        for bag, m in zip(ds, margins):
            buf.write(f"{bag.id},{1 if m >= 0 else -1},{float(m)!r}\n")
    else:
        for _, m in models:
            if m.dimension != ds.dimension:
                raise DataError(f"dataset dimension {ds.dimension} does not match model "
                                f"dimension {m.dimension}")
        buf.write("bag_id,predicted_label,margin\n")
        for bag in ds:
            cls, margins = predict_multiclass(models, bag)
            buf.write(f"{bag.id},{models[int(np.argmax(margins))][0]},{float(margins.max())!r}\n")
    # nothing is written unless every bag was scored
    _emit(buf.getvalue(), args.out)
    return EXIT_OK


def cmd_cv(args) -> int:
    cfg = train_config(args)
    ds = load_dataset(args.data, args.format)
    report = cross_validate(ds, args.folds, cfg, args.seed, with_ap=args.ap,
                            name=Path(args.data).name)
    md = report.to_markdown()
    if args.out:
        out = Path(args.out)
        out.write_text(report.to_json(), encoding="utf-8")
        out.with_suffix(".md").write_text(md, encoding="utf-8")
    sys.stdout.write(md)
    return EXIT_OK


def cmd_inspect(args) -> int:
    models = load_models(args.model)
    parts = []
    if models is not None:
        parts.append("Prototypes per class\n\n" + prototype_counts_markdown(models))
        if args.data:
            ds = load_dataset(args.data, args.format)
            for name, m in models:
                rows = inspect_prototypes(m, ds, args.top)
                parts.append(f"Class {name}\n\n" + inspection_markdown(rows))
    else:
        if not args.data:
            raise UsageError("inspect of a single model needs --data")
        model = load_model(args.model)
        ds = load_dataset(args.data, args.format)
        parts.append(inspection_markdown(inspect_prototypes(model, ds, args.top)))
    _emit("\n".join(parts), args.out)
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    for path in args.reports:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}") from exc
        try:
            reports.append(EvalReport.from_dict(doc))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: {exc}") from exc
    _emit(merge_reports(reports, [Path(p).stem for p in args.reports]), args.out)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "cv": cmd_cv,
            "inspect": cmd_inspect, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"misboost {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ModelFormatError, OSError, ValueError) as exc:
        print(f"misboost {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
