"""Cross-validated accuracy, average precision and prototype inspection."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .boosting import (BoostedModel, TrainConfig, _map, decision_function, predict_multiclass,
                       train, train_one_vs_all)
from .data import DataError, Dataset, stratified_fold_indices
from .geometry import PackedBags

log = logging.getLogger(__name__)

REPORT_FORMAT = "misboost-eval"
REPORT_VERSION = 1


def config_fingerprint(cfg: TrainConfig, folds: int, seed: int) -> str:
    doc = {"config": cfg.to_dict(), "folds": folds, "seed": seed}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class EvalReport:
    """Outcome of one cross-validation run.

    ``predictions`` holds one ``(bag_id, fold, true, predicted, margin)``
    row per bag; for multiclass data ``margin`` is the list of per-class
    margins.  Wall-clock values live only in ``fold_seconds``.
    """

    dataset: str
    seed: int
    accuracies: list
    class_names: list
    confusion: list
    config: dict
    config_fingerprint: str
    selected_stages: list
    train_fingerprints: list
    predictions: list
    average_precision: dict | None = None
    fold_seconds: list = field(default_factory=list)

    def __post_init__(self):
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    @property
    def folds(self) -> int:
        return len(self.accuracies)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        # sample standard deviation over folds
        return float(np.std(self.accuracies, ddof=1)) if self.folds > 1 else 0.0

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_VERSION,
            "dataset": self.dataset,
            "seed": self.seed,
            "folds": self.folds,
            "accuracies": list(self.accuracies),
            "mean_accuracy": self.mean,
            "std_accuracy": self.std,
            "class_names": list(self.class_names),
            "confusion": self.confusion,
            "average_precision": self.average_precision,
            "selected_stages": self.selected_stages,
            "config": self.config,
            "config_fingerprint": self.config_fingerprint,
            "train_fingerprints": self.train_fingerprints,
            "predictions": [list(p) for p in self.predictions],
            "timing": {"fold_seconds": list(self.fold_seconds),
                       "total_seconds": float(sum(self.fold_seconds))},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        if not isinstance(d, dict) or d.get("format") != REPORT_FORMAT:
            raise ValueError("not a misboost evaluation report")
        if d.get("version") != REPORT_VERSION:
            raise ValueError(f"unsupported report version {d.get('version')!r}")
        return cls(
            dataset=d["dataset"], seed=d["seed"], accuracies=d["accuracies"],
            class_names=d["class_names"], confusion=d["confusion"], config=d["config"],
            config_fingerprint=d["config_fingerprint"], selected_stages=d["selected_stages"],
            train_fingerprints=d["train_fingerprints"],
            predictions=[tuple(p) for p in d["predictions"]],
            average_precision=d.get("average_precision"),
            fold_seconds=d.get("timing", {}).get("fold_seconds", []),
        )

    def to_markdown(self) -> str:
        lines = [f"# Cross-validation: {self.dataset}", ""]
        lines += [f"- folds: {self.folds}", f"- seed: {self.seed}",
                  f"- restricted mode: {self.config.get('restricted_mode')}",
                  f"- config fingerprint: `{self.config_fingerprint}`",
                  f"- mean accuracy: {self.mean:.4f} (std {self.std:.4f})", ""]
        lines += ["| fold | accuracy | stages |", "|---:|---:|---:|"]
        for f, (a, m) in enumerate(zip(self.accuracies, self.selected_stages)):
            lines.append(f"| {f} | {a:.4f} | {_fmt_stages(m)} |")
        lines += ["", "## Confusion (rows: true, columns: predicted)", ""]
        lines.append("| | " + " | ".join(self.class_names) + " |")
        lines.append("|---" * (len(self.class_names) + 1) + "|")
        for name, row in zip(self.class_names, self.confusion):
            lines.append(f"| {name} | " + " | ".join(str(v) for v in row) + " |")
        if self.average_precision is not None:
            lines += ["", "## Average precision (pooled held-out margins)", "",
                      "| class | AP |", "|---|---:|"]
            for name, ap in self.average_precision.items():
                lines.append(f"| {name} | {'n/a' if ap is None else f'{ap:.4f}'} |")
        lines += ["", "## Held-out predictions", "", "| bag | fold | true | predicted | margin |",
                  "|---|---:|---|---|---|"]
        for bag_id, fold, true, pred, margin in self.predictions:
            lines.append(f"| {bag_id} | {fold} | {true} | {pred} | {_fmt_margin(margin)} |")
        lines += ["", "## Timing (varies between runs)", "", "| fold | seconds |", "|---:|---:|"]
        for f, s in enumerate(self.fold_seconds):
            lines.append(f"| {f} | {s:.2f} |")
        lines.append(f"| total | {sum(self.fold_seconds):.2f} |")
        return "\n".join(lines) + "\n"


def _fmt_stages(m):
    if isinstance(m, dict):
        return ", ".join(f"{k}={v}" for k, v in m.items())
    return str(m)


def _fmt_margin(m):
    if isinstance(m, (list, tuple)):
        return " ".join("n/a" if v is None else repr(float(v)) for v in m)
    return repr(float(m))


# ---------------------------------------------------------------------------
# average precision


def average_precision(scores) -> float:
    """All-points average precision of ``(margin, label)`` pairs.

    Items are ranked by margin, largest first; equal margins keep their
    input order.  Labels are positive when ``> 0``.
    """
    items = list(scores)
    if not items:
        raise ValueError("average precision of an empty ranking")
    margins = np.array([float(m) for m, _ in items])
    pos = np.array([float(y) > 0 for _, y in items])
    if not pos.any():
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-margins, kind="stable")
    hits = pos[order]
    ranks = np.flatnonzero(hits) + 1
    precision = np.arange(1, len(ranks) + 1) / ranks
    return float(precision.mean())


# ---------------------------------------------------------------------------
# cross validation


def _fold_job(args):
    f, train_set, test_set, cfg = args
    t0 = time.perf_counter()
    if train_set.is_multiclass:
        models = train_one_vs_all(train_set, cfg)
        margins = [predict_multiclass(models, b)[1] for b in test_set]
        present = [m.metadata["class_index"] for _, m in models]
        full = np.full((len(test_set), len(train_set.class_names)), -np.inf)
        full[:, present] = np.array(margins)
        preds = [present[int(np.argmax(m))] for m in margins]
        stages = {name: m.n_stages for name, m in models}
        fingerprint = models[0][1].metadata["dataset_fingerprint"]
        # classes missing from the training fold get no margin
        margins_out = [[float(v) if np.isfinite(v) else None for v in row] for row in full]
    else:
        model = train(train_set, cfg)
        margins = decision_function(model, test_set)
        preds = [1 if m >= 0 else -1 for m in margins]
        stages = model.n_stages
        fingerprint = model.metadata["dataset_fingerprint"]
        margins_out = [float(m) for m in margins]
    return {"fold": f, "preds": preds, "margins": margins_out, "stages": stages,
            "fingerprint": fingerprint, "seconds": time.perf_counter() - t0}


def cross_validate(dataset: Dataset, folds: int, cfg: TrainConfig, seed: int,
                   with_ap: bool = False, held_out=None, name: str | None = None) -> EvalReport:
    """Stratified ``folds``-fold cross-validation of the full training procedure.

    Every fold trains from scratch (normalization, clustering, ensemble-size
    selection) on its training bags only, using ``cfg`` with ``seed``.
    ``held_out`` optionally fixes the held-out index sets.
    """
    labels = dataset.labels()
    if held_out is None:
        held_out = stratified_fold_indices(labels, folds, seed)
    held_out = [np.asarray(h, dtype=np.int64) for h in held_out]
    if len(held_out) != folds:
        raise DataError(f"{len(held_out)} held-out sets given for {folds} folds")
    cfg = replace(cfg, seed=seed)
    # folds run in parallel; nested selection stays serial
    inner = replace(cfg, jobs=1) if cfg.jobs > 1 else cfg
    jobs = []
    for f, h in enumerate(held_out):
        tr = np.setdiff1d(np.arange(len(dataset)), h)
        jobs.append((f, dataset.subset(tr), dataset.subset(h), inner))
    results = _map(_fold_job, jobs, cfg.jobs)

    if dataset.is_multiclass:
        class_values = list(range(len(dataset.class_names)))
        class_names = list(dataset.class_names)
    else:
        class_values, class_names = [-1, 1], ["-1", "+1"]
    index = {v: i for i, v in enumerate(class_values)}
    confusion = [[0] * len(class_values) for _ in class_values]
    accuracies, predictions = [], []
    pooled = []
    for res, h in zip(results, held_out):
        truth = labels[h]
        correct = 0
        for i, t, p, m in zip(h, truth, res["preds"], res["margins"]):
            confusion[index[int(t)]][index[int(p)]] += 1
            correct += int(t) == int(p)
            predictions.append((dataset.bags[i].id, res["fold"], _label_name(dataset, t),
                                _label_name(dataset, p), m))
            pooled.append((int(t), m))
        accuracies.append(correct / len(h))

    ap = None
    if with_ap:
        ap = {}
        if dataset.is_multiclass:
            for c, cname in enumerate(class_names):
                ap[cname] = _safe_ap([(-np.inf if m[c] is None else m[c], 1 if t == c else -1)
                                      for t, m in pooled])
        else:
            ap["+1"] = _safe_ap([(m, t) for t, m in pooled])

    return EvalReport(
        dataset=name or "dataset", seed=seed, accuracies=accuracies, class_names=class_names,
        confusion=confusion, config=cfg.to_dict(),
        config_fingerprint=config_fingerprint(cfg, folds, seed),
        selected_stages=[r["stages"] for r in results],
        train_fingerprints=[r["fingerprint"] for r in results],
        predictions=predictions, average_precision=ap,
        fold_seconds=[r["seconds"] for r in results])


def _label_name(dataset: Dataset, v) -> str:
    if dataset.is_multiclass:
        return dataset.class_names[int(v)]
    return "+1" if int(v) > 0 else "-1"


def _safe_ap(pairs):
    try:
        return average_precision(pairs)
    except ValueError:
        return None


def merge_reports(reports, names=None) -> str:
    """Side-by-side markdown table of several reports."""
    names = names or [r.dataset for r in reports]
    lines = ["| run | dataset | restricted | folds | mean accuracy | std | AP |",
             "|---|---|---|---:|---:|---:|---|"]
    for n, r in zip(names, reports):
        ap = "-"
        if r.average_precision:
            ap = ", ".join(f"{k}: {'n/a' if v is None else f'{v:.4f}'}"
                           for k, v in r.average_precision.items())
        lines.append(f"| {n} | {r.dataset} | {r.config.get('restricted_mode')} | {r.folds} "
                     f"| {r.mean:.4f} | {r.std:.4f} | {ap} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# prototype inspection


@dataclass(frozen=True)
class InspectionRow:
    bag_id: str
    stage: int
    instance: int
    distance: float


def inspect_prototypes(model: BoostedModel, dataset: Dataset, top_k: int) -> list:
    """Nearest instance of every bag to each of the first ``top_k`` prototypes.

    Prototypes are ranked by stage index.  Distances are measured in the
    model's normalized feature space.  Rows are ordered by bag, then stage.
    """
    if top_k < 1 or top_k > model.n_stages:
        raise ValueError(f"top_k must be between 1 and the model size {model.n_stages}, got {top_k}")
    if dataset.dimension != model.dimension:
        raise DataError(
            f"dataset dimension {dataset.dimension} does not match model dimension {model.dimension}")
    packed = PackedBags([model.normalized_instances(b) for b in dataset.bags])
    per_stage = [packed.nearest_in_bags(c.prototype) for c in model.base_classifiers[:top_k]]
    rows = []
    for i, bag in enumerate(dataset.bags):
        for m, (dist, idx) in enumerate(per_stage):
            rows.append(InspectionRow(bag.id, m + 1, int(idx[i]), float(dist[i])))
    return rows


def inspection_markdown(rows) -> str:
    lines = ["Prototypes are ranked by boosting stage (stage 1 first); distances are in",
             "normalized feature units.", "",
             "| bag | stage | nearest instance | distance |", "|---|---:|---:|---:|"]
    for r in rows:
        lines.append(f"| {r.bag_id} | {r.stage} | {r.instance} | {r.distance!r} |")
    return "\n".join(lines) + "\n"


def prototype_counts(models) -> list:
    """``(class_name, number of prototypes)`` for each one-vs-all model."""
    return [(name, m.n_stages) for name, m in models]


def prototype_counts_markdown(models) -> str:
    lines = ["| class | prototypes |", "|---|---:|"]
    for name, n in prototype_counts(models):
        lines.append(f"| {name} | {n} |")
    return "\n".join(lines) + "\n"
