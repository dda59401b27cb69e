"""The boosting loop, ensemble-size selection, training and prediction."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .base_learner import (BaseClassifier, CandidatePool, FitConfig, learn_base_classifier,
                           score_bag, sigmoid_score)
from .clustering import ClusterCenters, kmeans
from .data import (DataError, Dataset, NormalizationStats, apply_normalization, binarize,
                   fit_normalization, stratified_fold_indices, stratified_holdout_indices)
from .geometry import PackedBags, SoftMinConfig

log = logging.getLogger(__name__)

MODEL_FORMAT = "misboost-model"
MODEL_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    k: int = 100
    max_stages: int = 100
    selection_folds: int = 4
    alpha: float | None = None
    alpha_scale: float = 10.0
    epsilon: float = 1e-8
    fit: FitConfig = field(default_factory=FitConfig)
    seed: int = 0
    restricted_mode: bool = False
    normalize: bool = True
    kmeans_max_iters: int = 100
    early_stop_cost: float = 1e-10
    jobs: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.max_stages < 1:
            raise ValueError("max_stages must be at least 1")
        if self.selection_folds < 2:
            raise ValueError("selection_folds must be at least 2")
        if self.alpha is not None and not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not self.alpha_scale > 0 or not self.epsilon > 0:
            raise ValueError("alpha_scale and epsilon must be positive")
        if self.jobs < 1:
            raise ValueError("jobs must be at least 1")

    @property
    def fit_config(self) -> FitConfig:
        return replace(self.fit, restricted_mode=self.restricted_mode)

    def to_dict(self) -> dict:
        # jobs only changes scheduling, never results, so it is left out
        return {
            "k": self.k,
            "max_stages": self.max_stages,
            "selection_folds": self.selection_folds,
            "alpha": self.alpha,
            "alpha_scale": self.alpha_scale,
            "epsilon": self.epsilon,
            "fit": self.fit.to_dict(),
            "seed": self.seed,
            "restricted_mode": self.restricted_mode,
            "normalize": self.normalize,
            "kmeans_max_iters": self.kmeans_max_iters,
            "early_stop_cost": self.early_stop_cost,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["fit"] = FitConfig.from_dict(d.get("fit", {}))
        return cls(**d)


@dataclass
class BoostingState:
    weights: np.ndarray
    ensemble: list = field(default_factory=list)
    validation_errors: list = field(default_factory=list)
    stage_costs: list = field(default_factory=list)
    exact_costs: list = field(default_factory=list)

    @classmethod
    def initial(cls, n_bags: int) -> "BoostingState":
        return cls(np.full(n_bags, 1.0 / n_bags))


@dataclass(frozen=True)
class BoostedModel:
    base_classifiers: tuple
    normalization: NormalizationStats
    config: TrainConfig
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "base_classifiers", tuple(self.base_classifiers))
        if not self.base_classifiers:
            raise ValueError("a model needs at least one base classifier")
        d = self.normalization.dimension
        if any(c.dimension != d for c in self.base_classifiers):
            raise ValueError("base classifier dimensions disagree with the normalization")

    @property
    def dimension(self) -> int:
        return self.normalization.dimension

    @property
    def n_stages(self) -> int:
        return len(self.base_classifiers)

    def normalized_instances(self, bag) -> np.ndarray:
        x = np.asarray(getattr(bag, "instances", bag), dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dimension:
            raise DataError(f"bag dimension {x.shape[-1]} does not match model dimension {self.dimension}")
        return self.normalization.transform(x)

    def stage_scores(self, bag) -> np.ndarray:
        x = self.normalized_instances(bag)
        return np.array([score_bag(c, x) for c in self.base_classifiers])

    def margin(self, bag) -> float:
        """Sum of the base classifier scores (exact distances only)."""
        total = 0.0
        for s in self.stage_scores(bag):
            total += s
        return float(total)


def predict(model: BoostedModel, bag) -> tuple[int, float]:
    """``(label, margin)``; a zero margin counts as positive."""
    m = model.margin(bag)
    return (1 if m >= 0 else -1), m


def decision_function(model: BoostedModel, dataset: Dataset) -> np.ndarray:
    if dataset.dimension != model.dimension:
        raise DataError(
            f"dataset dimension {dataset.dimension} does not match model dimension {model.dimension}")
    return np.array([model.margin(b) for b in dataset.bags])


# independent random streams derived from the user seed
_SPLIT, _HOLDOUT, _FOLD, _FINAL = 1, 2, 3, 4


def derive_seed(seed: int, *tags: int) -> int:
    return int(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, *tags]).generate_state(1)[0])


def _binary_labels(dataset: Dataset) -> np.ndarray:
    y = dataset.labels()
    if not set(np.unique(y)) <= {-1, 1}:
        raise DataError("binary training needs labels in {-1, +1}")
    if len(np.unique(y)) < 2:
        raise DataError("training set contains a single class")
    return y


def resolve_alpha(packed: PackedBags, centers: ClusterCenters, cfg: TrainConfig) -> float:
    """Fixed alpha, or ``alpha_scale`` over the median exact bag distance from the first center."""
    if cfg.alpha is not None:
        return float(cfg.alpha)
    med = float(np.median(packed.exact_bag_distances(centers.centers[0])))
    if not med > 0:
        log.warning("median bag distance from the first center is zero; using alpha=%g",
                    cfg.alpha_scale)
        return float(cfg.alpha_scale)
    return cfg.alpha_scale / med


def boost_round(state: BoostingState, packed: PackedBags, centers, softmin: SoftMinConfig,
                fit: FitConfig, pool: CandidatePool | None = None) -> tuple[BoostingState, np.ndarray]:
    """Fit one stage and re-weight the bags.

    Returns the new state and the stage's exact-distance scores on the
    training bags.
    """
    clf, cost = learn_base_classifier(packed, state.weights, centers, softmin, fit, pool)
    scores = sigmoid_score(clf.beta1 * packed.exact_bag_distances(clf.prototype) + clf.beta0)
    exact = float(((packed.labels - scores) ** 2) @ state.weights)
    new = update_weights(state.weights, packed.labels, scores)
    next_state = BoostingState(new, state.ensemble + [clf], list(state.validation_errors),
                               state.stage_costs + [cost], state.exact_costs + [exact])
    return next_state, scores


def soft_exact_gap(soft: float, exact: float) -> float:
    """Relative difference of a stage's soft and exact costs (0 when both are tiny)."""
    scale = max(abs(soft), abs(exact))
    return 0.0 if scale < 1e-6 else abs(soft - exact) / scale


def update_weights(weights, y, scores) -> np.ndarray:
    """``w_i exp(-y_i f(B_i))``, normalized to unit sum."""
    w = np.asarray(weights, dtype=np.float64) * np.exp(-np.asarray(y) * np.asarray(scores))
    return w / w.sum()


@dataclass
class _Run:
    normalization: NormalizationStats
    centers: ClusterCenters
    alpha: float
    state: BoostingState
    early_stopped: bool


def _prepare(train: Dataset, cfg: TrainConfig, seed: int):
    stats = fit_normalization(train) if cfg.normalize else NormalizationStats.identity(train.dimension)
    ntrain = apply_normalization(train, stats)
    packed = PackedBags.from_dataset(ntrain)
    k = cfg.k
    if packed.n_instances < k:
        log.warning("only %d training instances; lowering k from %d", packed.n_instances, k)
        k = packed.n_instances
    centers = kmeans(packed.X, k, seed=seed, max_iters=cfg.kmeans_max_iters)
    alpha = resolve_alpha(packed, centers, cfg)
    return stats, packed, centers, alpha


def _boost(train: Dataset, cfg: TrainConfig, n_stages: int, seed: int,
           validation: Dataset | None = None) -> _Run:
    stats, packed, centers, alpha = _prepare(train, cfg, seed)
    softmin = SoftMinConfig(alpha, cfg.epsilon)
    fit = cfg.fit_config
    pool = CandidatePool(packed.X, packed, alpha) if fit.restricted_mode else None
    val_packed = None
    if validation is not None:
        val_packed = PackedBags.from_dataset(apply_normalization(validation, stats))
        val_margin = np.zeros(val_packed.n_bags)
    state = BoostingState.initial(packed.n_bags)
    early = False
    for m in range(n_stages):
        state, _ = boost_round(state, packed, centers, softmin, fit, pool)
        if val_packed is not None:
            clf = state.ensemble[-1]
            val_margin += sigmoid_score(clf.beta1 * val_packed.exact_bag_distances(clf.prototype)
                                        + clf.beta0)
            pred = np.where(val_margin >= 0, 1.0, -1.0)
            state.validation_errors.append(float(np.mean(pred != val_packed.labels)))
        log.debug("stage %d: soft cost %.6g", m + 1, state.stage_costs[-1])
        if state.stage_costs[-1] <= cfg.early_stop_cost and m + 1 < n_stages:
            log.info("stage %d fit the weighted data exactly (cost %.3g); stopping early",
                     m + 1, state.stage_costs[-1])
            early = True
            break
    return _Run(stats, centers, alpha, state, early)


def _fold_curve(args) -> list:
    train, val, cfg, seed = args
    run = _boost(train, cfg, cfg.max_stages, seed, validation=val)
    curve = list(run.state.validation_errors)
    # an early-stopped ensemble no longer changes
    curve += [curve[-1]] * (cfg.max_stages - len(curve))
    return curve


def _map(fn, items, jobs):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(items))) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def validation_curves(dataset: Dataset, cfg: TrainConfig) -> np.ndarray:
    """Validation 0-1 error after every stage, one row per selection fold."""
    y = _binary_labels(dataset)
    try:
        held = stratified_fold_indices(y, cfg.selection_folds, derive_seed(cfg.seed, _SPLIT))
        splits = [(np.setdiff1d(np.arange(len(y)), h), h) for h in held]
    except DataError as exc:
        log.warning("%s; falling back to a single 75/25 stratified holdout", exc)
        splits = [stratified_holdout_indices(y, 0.25, derive_seed(cfg.seed, _HOLDOUT))]
    jobs = [(dataset.subset(tr), dataset.subset(va), cfg, derive_seed(cfg.seed, _FOLD, f))
            for f, (tr, va) in enumerate(splits)]
    return np.array(_map(_fold_curve, jobs, cfg.jobs))


def pick_num_stages(mean_curve) -> int:
    """Smallest stage count reaching the minimum of the averaged curve."""
    c = np.asarray(mean_curve, dtype=np.float64)
    return int(np.flatnonzero(c <= c.min() + 1e-12)[0]) + 1


def select_num_stages(dataset: Dataset, cfg: TrainConfig) -> int:
    return pick_num_stages(validation_curves(dataset, cfg).mean(axis=0))


def train(dataset: Dataset, cfg: TrainConfig) -> BoostedModel:
    """Select the ensemble size on validation folds, then refit on all bags."""
    _binary_labels(dataset)
    curves = validation_curves(dataset, cfg)
    mean_curve = curves.mean(axis=0)
    n_stages = pick_num_stages(mean_curve)
    log.info("selected %d stages (mean validation error %.4f)", n_stages, mean_curve[n_stages - 1])
    run = _boost(dataset, cfg, n_stages, derive_seed(cfg.seed, _FINAL))
    gaps = [soft_exact_gap(s, e) for s, e in zip(run.state.stage_costs, run.state.exact_costs)]
    if max(gaps) > 0.05:
        log.warning("soft and exact training costs differ by up to %.0f%% (stage %d); "
                    "alpha=%.4g may be too small", 100 * max(gaps), int(np.argmax(gaps)) + 1,
                    run.alpha)
    meta = {
        "seed": cfg.seed,
        "dataset_fingerprint": dataset.fingerprint(),
        "n_bags": len(dataset),
        "selected_stages": n_stages,
        "validation_curve": mean_curve.tolist(),
        "validation_folds": int(curves.shape[0]),
        "alpha": run.alpha,
        "k_used": run.centers.k,
        "restricted_mode": cfg.restricted_mode,
        "retrained_on_full_set": True,
        "early_stopped": run.early_stopped,
        "stage_costs": list(run.state.stage_costs),
        "stage_exact_costs": list(run.state.exact_costs),
    }
    return BoostedModel(tuple(run.state.ensemble), run.normalization, cfg, meta)


# ---------------------------------------------------------------------------
# one-vs-all


def train_one_vs_all(dataset: Dataset, cfg: TrainConfig) -> list:
    """One binary model per class; returns ``[(class_name, model), ...]``."""
    if not dataset.is_multiclass:
        raise DataError("one-vs-all training needs a multiclass dataset")
    present = np.unique(dataset.labels())
    if len(present) < 2:
        raise DataError("one-vs-all training needs at least two classes")
    out = []
    for c, name in enumerate(dataset.class_names):
        if c not in present:
            log.warning("class %r has no training bags; skipped", name)
            continue
        model = train(binarize(dataset, c), cfg)
        model.metadata.update({"class_index": c, "class_name": name})
        out.append((name, model))
    return out


def predict_multiclass(models, bag, class_names=None) -> tuple[int, np.ndarray]:
    """Class index with the largest margin (lowest index on ties) and all margins."""
    margins = np.array([m.margin(bag) for _, m in models])
    best = int(np.argmax(margins))
    cls = models[best][1].metadata.get("class_index", best)
    return int(cls), margins


# ---------------------------------------------------------------------------
# persistence


def model_to_dict(model: BoostedModel) -> dict:
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "dimension": model.dimension,
        "normalization": model.normalization.to_dict(),
        "base_classifiers": [c.to_dict() for c in model.base_classifiers],
        "config": model.config.to_dict(),
        "seed": model.config.seed,
        "metadata": model.metadata,
    }


def model_to_json(model: BoostedModel) -> str:
    return json.dumps(model_to_dict(model), indent=1, sort_keys=True) + "\n"


def model_from_dict(d: dict) -> BoostedModel:
    if not isinstance(d, dict) or d.get("format") != MODEL_FORMAT:
        raise ModelFormatError("not a misboost model document")
    if d.get("version") != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {d.get('version')!r}")
    try:
        stats = NormalizationStats.from_dict(d["normalization"])
        clfs = [BaseClassifier.from_dict(c) for c in d["base_classifiers"]]
        cfg = TrainConfig.from_dict(d["config"])
        model = BoostedModel(tuple(clfs), stats, cfg, dict(d.get("metadata", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"invalid model document: {exc}") from exc
    if model.dimension != d.get("dimension"):
        raise ModelFormatError("declared dimension disagrees with the stored parameters")
    return model


def save_model(model: BoostedModel, path) -> None:
    Path(path).write_text(model_to_json(model), encoding="utf-8")


def load_model(path) -> BoostedModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return model_from_dict(d)
