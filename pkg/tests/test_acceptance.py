"""Acceptance criteria, one PASS/FAIL line each (see the terminal summary).

Benchmark criteria read the reports written by ``benchmarks/run.sh`` (full
default protocol).  Set ``MISBOOST_BENCHMARKS=run`` to recompute them here
instead; on one processor that takes a long time.  A benchmark below its
threshold is reported as FAIL and marked xfail, never hidden.
"""

import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from misboost.base_learner import (BaseClassifier, CandidatePool, FitConfig,
                                   learn_base_classifier, weighted_cost)
from misboost.boosting import (BoostedModel, TrainConfig, predict_multiclass, train,
                               train_one_vs_all)
from misboost.clustering import kmeans
from misboost.data import NormalizationStats, load_dataset, stratified_fold_indices
from misboost.evaluation import EvalReport, cross_validate
from misboost.geometry import PackedBags, SoftMinConfig
from misboost.synthetic import multiclass_dataset, separable_dataset

ROOT = Path(__file__).resolve().parent.parent
BENCH = ROOT / "benchmarks"
DATA = ROOT / "data"

# threshold, published accuracy (percent)
TARGETS = {
    "musk1": ("1", 0.85, 90.3),
    "musk2": ("2", 0.80, 94.4),
    "elephant": ("3a", 0.80, 89.0),
    "tiger": ("3b", 0.78, 85.5),
    "fox": ("3c", 0.58, 80.0),
}

DEFAULTS = dict(k=100, max_stages=100, folds=10, seed=42)

PROPERTY_SUITE = [
    "tests/test_geometry.py::test_softmin_between_min_and_max",
    "tests/test_geometry.py::test_softmin_decreases_with_alpha",
    "tests/test_geometry.py::test_softmin_sharp_limit_matches_min",
    "tests/test_base_learner.py::test_soft_cost_gradient_matches_finite_differences",
    "tests/test_boosting.py::test_weights_stay_normalized_each_round",
    "tests/test_base_learner.py::test_coordinate_descent_cost_never_increases",
    "tests/test_boosting.py::test_same_seed_same_bytes",
    "tests/test_boosting.py::test_round_trip_is_exact",
    "tests/test_evaluation.py::test_ap_matches_brute_force_on_random_rankings",
]


def _benchmark_report(name):
    """The full-protocol report for ``name``, or ``None`` with a reason."""
    path = DATA / f"{name}.mil"
    if not path.exists():
        return None, "dataset not available offline"
    ds = load_dataset(path)
    if os.environ.get("MISBOOST_BENCHMARKS") == "run":
        cfg = TrainConfig(seed=DEFAULTS["seed"], jobs=os.cpu_count() or 1)
        return cross_validate(ds, DEFAULTS["folds"], cfg, DEFAULTS["seed"], with_ap=True,
                              name=path.name), ""
    report_path = BENCH / f"{name}.json"
    if not report_path.exists():
        return None, f"no report; run benchmarks/run.sh to produce {report_path.name}"
    report = EvalReport.from_dict(json.loads(report_path.read_text()))
    cfg = report.config
    got = dict(k=cfg["k"], max_stages=cfg["max_stages"], folds=report.folds, seed=report.seed)
    if got != DEFAULTS:
        return None, f"report was not produced with the default protocol ({got})"
    # the stored folds must be the folds of the data in this checkout
    held = stratified_fold_indices(ds.labels(), report.folds, report.seed)
    want = [ds.subset(np.setdiff1d(np.arange(len(ds)), h)).fingerprint() for h in held]
    if want != report.train_fingerprints:
        return None, "report does not match the current dataset"
    return report, ""


@pytest.mark.parametrize("name", list(TARGETS))
def test_benchmark_accuracy(name, record_criterion):
    label, threshold, published = TARGETS[name]
    report, why = _benchmark_report(name)
    if report is None:
        record_criterion(label, False, f"{name}: not evaluated ({why}); threshold "
                                       f"{threshold:.2f}, published {published / 100:.3f}")
        pytest.xfail(f"{name}: {why}")
    minutes = sum(report.fold_seconds) / 60
    detail = (f"{name}: mean accuracy {report.mean:.4f} (std {report.std:.4f}), threshold "
              f"{threshold:.2f}, published {published / 100:.3f}; 10-fold CV took "
              f"{minutes:.1f} min on {os.cpu_count()} CPU")
    ok = report.mean >= threshold
    record_criterion(label, ok, detail)
    if not ok:
        pytest.xfail(f"{name} below threshold; analysis in README")


def test_property_suite_under_two_minutes(record_criterion):
    start = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          *PROPERTY_SUITE], cwd=ROOT, capture_output=True, text=True)
    elapsed = time.perf_counter() - start
    last = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    ok = res.returncode == 0 and elapsed < 120
    record_criterion("4", ok, f"property suite {last.strip('= ')}; wall {elapsed:.1f} s (< 120 s)")
    assert ok, res.stdout[-2000:]


def test_synthetic_separable_oracle(record_criterion):
    ds = separable_dataset(n_pos=20, n_neg=20, seed=0)
    cfg = TrainConfig(seed=42)
    model = train(ds, cfg)
    proto = model.normalization.inverse(model.base_classifiers[0].prototype[None, :])[0]
    dist = float(np.linalg.norm(proto - [5.0, 5.0]))
    report = cross_validate(ds, 10, cfg, seed=42)
    ok = model.n_stages == 1 and dist < 1.0 and report.mean == 1.0
    record_criterion("5", ok, f"M* = {model.n_stages}, prototype {np.round(proto, 3).tolist()} "
                              f"at distance {dist:.3f} from (5,5), 10-fold CV accuracy "
                              f"{report.mean:.4f}")
    assert ok


def test_restricted_ablation(record_criterion):
    ds = separable_dataset(n_pos=20, n_neg=20, seed=0)
    pb = PackedBags.from_dataset(ds)
    w = np.full(pb.n_bags, 1.0 / pb.n_bags)
    centers = kmeans(pb.X, 20, seed=0)
    softmin = SoftMinConfig(20.0)
    free, _ = learn_base_classifier(pb, w, centers, softmin, FitConfig())
    # no candidate within 0.5 of the optimum
    far = pb.X[np.linalg.norm(pb.X - [5.0, 5.0], axis=1) > 0.5]
    pool = CandidatePool(far, pb, softmin.alpha)
    confined, _ = learn_base_classifier(pb, w, centers, softmin,
                                        FitConfig(restricted_mode=True), pool)
    free_cost = weighted_cost(free, pb, w)
    confined_cost = weighted_cost(confined, pb, w)
    assert any(np.array_equal(confined.prototype, x) for x in far)
    ok = confined_cost > free_cost
    record_criterion("6", ok, f"exact training cost: learned prototype {free_cost:.3e}, "
                              f"restricted to {len(far)}/{pb.n_instances} instances "
                              f"{confined_cost:.3e}")
    assert ok


def test_one_vs_all_synthetic(record_criterion):
    ds = multiclass_dataset(bags_per_class=15, seed=0)
    models = train_one_vs_all(ds, TrainConfig(seed=42))
    preds = [predict_multiclass(models, b)[0] for b in ds]
    acc = float(np.mean(np.array(preds) == ds.labels()))

    def const(v, idx):
        m = BoostedModel((BaseClassifier(np.zeros(1), 2 * np.arctanh(v), 0.0),),
                         NormalizationStats.identity(1), TrainConfig())
        m.metadata["class_index"] = idx
        return (f"c{idx}", m)

    tied = [const(v, i) for i, v in enumerate([0.1, 0.7, 0.3, 0.7])]
    tie_cls, _ = predict_multiclass(tied, [[0.0]])
    ok = acc == 1.0 and tie_cls == 1
    record_criterion("7", ok, f"3-class one-vs-all training accuracy {acc:.4f}; "
                              f"tie between classes 1 and 3 resolved to class {tie_cls}")
    assert ok
