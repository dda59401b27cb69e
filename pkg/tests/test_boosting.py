import json
import logging

import numpy as np
import pytest

from misboost.base_learner import BaseClassifier, FitConfig, score_bag
from misboost.boosting import (BoostedModel, BoostingState, ModelFormatError, TrainConfig,
                               boost_round, decision_function, load_model, model_from_dict,
                               model_to_dict, model_to_json, pick_num_stages, predict,
                               predict_multiclass, save_model, select_num_stages, train,
                               train_one_vs_all, update_weights)
from misboost.clustering import kmeans
from misboost.data import (Bag, DataError, Dataset, NormalizationStats, apply_normalization,
                           binarize, fit_normalization)
from misboost.geometry import PackedBags, SoftMinConfig
from misboost.synthetic import multiclass_dataset, separable_dataset

FAST = TrainConfig(k=8, max_stages=4, seed=0)


def model_with(classifiers, d=1):
    return BoostedModel(tuple(classifiers), NormalizationStats.identity(d), FAST)


@pytest.fixture(scope="module")
def synthetic():
    return separable_dataset(n_pos=12, n_neg=12, seed=7)


@pytest.fixture(scope="module")
def synthetic_model(synthetic):
    return train(synthetic, FAST)


# ---------------------------------------------------------------------------
# weight update


def test_weight_update_oracle():
    # mpmath: (0.5 e^-1, 0.5) / (0.5 e^-1 + 0.5)
    w = update_weights([0.5, 0.5], np.array([1.0, -1.0]), np.array([1.0, 0.0]))
    assert abs(w[0] - 0.268941421369995) < 1e-14
    assert abs(w[1] - 0.731058578630005) < 1e-14


def test_zero_scores_leave_weights_unchanged():
    w0 = np.array([0.1, 0.2, 0.7])
    np.testing.assert_allclose(update_weights(w0, np.array([1.0, -1, 1]), np.zeros(3)), w0,
                               rtol=1e-15)


def test_weights_stay_normalized_each_round(synthetic):
    stats = fit_normalization(synthetic)
    pb = PackedBags.from_dataset(apply_normalization(synthetic, stats))
    C = kmeans(pb.X, 5, seed=0)
    state = BoostingState.initial(pb.n_bags)
    for _ in range(4):
        state, scores = boost_round(state, pb, C, SoftMinConfig(5.0), FitConfig())
        assert abs(state.weights.sum() - 1.0) <= 1e-12
        assert np.all(state.weights >= 0)
        assert np.all(np.abs(scores) <= 1.0)
    assert len(state.ensemble) == 4 and len(state.stage_costs) == 4


def test_stage_beats_best_constant(synthetic):
    pb = PackedBags.from_dataset(apply_normalization(synthetic, fit_normalization(synthetic)))
    C = kmeans(pb.X, 5, seed=0)
    rng = np.random.default_rng(0)
    w = rng.uniform(0.5, 1.5, pb.n_bags)
    state = BoostingState(w / w.sum())
    nxt, scores = boost_round(state, pb, C, SoftMinConfig(5.0), FitConfig())
    y = pb.labels
    err = np.dot(state.weights, np.sign(scores) != y)
    const_err = min(np.dot(state.weights, y != 1), np.dot(state.weights, y != -1))
    assert err <= const_err


# ---------------------------------------------------------------------------
# prediction


def test_single_stage_prediction():
    # beta0 chosen so that the score at distance 0 is exactly 0.8
    b0 = 2 * np.arctanh(0.8)
    m = model_with([BaseClassifier(np.zeros(1), b0, -1.0)])
    label, margin = predict(m, [[0.0], [3.0]])
    assert label == 1 and margin == pytest.approx(0.8, abs=1e-15)


def test_zero_margin_is_positive():
    b = 2 * np.arctanh(0.5)
    m = model_with([BaseClassifier(np.zeros(1), b, 0.0), BaseClassifier(np.zeros(1), -b, 0.0)])
    assert predict(m, [[1.0]]) == (1, 0.0)


def test_margin_is_sum_of_stage_scores(rng):
    clfs = [BaseClassifier(rng.normal(size=3), rng.normal(), rng.normal()) for _ in range(5)]
    stats = NormalizationStats(rng.normal(size=3), rng.uniform(0.5, 2, 3))
    m = BoostedModel(tuple(clfs), stats, FAST)
    bag = rng.normal(size=(4, 3))
    z = (bag - stats.mean) / stats.std
    want = sum(score_bag(c, z) for c in clfs)
    assert m.margin(bag) == pytest.approx(want, abs=1e-12)


def test_inference_ignores_soft_min(synthetic_model, synthetic):
    # margins recomputed from exact distances alone
    m = synthetic_model
    for bag in synthetic.bags[:6]:
        z = m.normalization.transform(bag.instances)
        total = 0.0
        for c in m.base_classifiers:
            D = min(np.linalg.norm(z - c.prototype, axis=1))
            total += 2.0 / (1.0 + np.exp(-(c.beta1 * D + c.beta0))) - 1.0
        assert m.margin(bag) == pytest.approx(total, abs=1e-12)


def test_dimension_mismatch_rejected(synthetic_model):
    with pytest.raises(DataError):
        predict(synthetic_model, np.zeros((2, 5)))
    ds = Dataset((Bag("x", np.zeros((1, 3)), 1),), 3)
    with pytest.raises(DataError):
        decision_function(synthetic_model, ds)


def test_model_invariants():
    with pytest.raises(ValueError):
        model_with([])
    with pytest.raises(ValueError):
        model_with([BaseClassifier(np.zeros(2), 0, 0)], d=1)


# ---------------------------------------------------------------------------
# ensemble size selection


def test_pick_smallest_argmin():
    assert pick_num_stages([0.4, 0.2, 0.2, 0.3]) == 2
    assert pick_num_stages([0.1, 0.3, 0.1]) == 1
    assert pick_num_stages([0.0]) == 1


def test_separable_selects_one_stage(synthetic):
    assert select_num_stages(synthetic, FAST) == 1


def test_holdout_fallback_is_logged(caplog):
    ds = separable_dataset(n_pos=3, n_neg=3, seed=1)
    with caplog.at_level(logging.WARNING):
        m = train(ds, TrainConfig(k=4, max_stages=2))
    assert "holdout" in caplog.text
    assert m.metadata["validation_folds"] == 1


def test_training_rejects_single_class():
    ds = Dataset((Bag("a", [[0.0]], 1), Bag("b", [[1.0]], 1)), 1)
    with pytest.raises(DataError, match="single class"):
        train(ds, FAST)


# ---------------------------------------------------------------------------
# training


def test_separable_training(synthetic_model, synthetic):
    m = synthetic_model
    assert m.n_stages == 1
    assert m.metadata["selected_stages"] == 1
    assert m.metadata["retrained_on_full_set"] is True
    margins = decision_function(m, synthetic)
    assert np.all(np.where(margins >= 0, 1, -1) == synthetic.labels())
    proto = m.normalization.inverse(m.base_classifiers[0].prototype[None, :])[0]
    assert np.linalg.norm(proto - [5.0, 5.0]) < 1.0
    assert len(m.metadata["validation_curve"]) == FAST.max_stages


def test_same_seed_same_bytes(synthetic):
    cfg = TrainConfig(k=6, max_stages=3, seed=11)
    assert model_to_json(train(synthetic, cfg)) == model_to_json(train(synthetic, cfg))


def test_parallel_selection_matches_serial(synthetic):
    cfg = TrainConfig(k=6, max_stages=3, seed=5)
    a = train(synthetic, cfg)
    b = train(synthetic, TrainConfig(k=6, max_stages=3, seed=5, jobs=2))
    assert model_to_json(a) == model_to_json(b)


def test_restricted_prototypes_are_training_instances(synthetic):
    m = train(synthetic, TrainConfig(k=6, max_stages=3, restricted_mode=True))
    X = m.normalization.transform(synthetic.instances())
    rows = {r.tobytes() for r in X}
    assert all(c.prototype.tobytes() in rows for c in m.base_classifiers)
    assert m.metadata["restricted_mode"] is True


def test_k_lowered_when_few_instances(caplog):
    ds = separable_dataset(n_pos=4, n_neg=4, noise_per_bag=(1, 1), seed=2)
    with caplog.at_level(logging.WARNING):
        m = train(ds, TrainConfig(k=100, max_stages=2))
    assert "lowering k" in caplog.text
    assert m.metadata["k_used"] < 100


def test_config_validation():
    for bad in (dict(k=0), dict(max_stages=0), dict(selection_folds=1), dict(alpha=-1.0),
                dict(jobs=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


# ---------------------------------------------------------------------------
# one-vs-all


@pytest.fixture(scope="module")
def three_class():
    return multiclass_dataset(bags_per_class=8, seed=3)


def test_one_vs_all_training_accuracy(three_class):
    models = train_one_vs_all(three_class, FAST)
    assert [n for n, _ in models] == ["class0", "class1", "class2"]
    preds = [predict_multiclass(models, b)[0] for b in three_class]
    assert preds == list(three_class.labels())


def test_one_vs_all_matches_binary_training():
    ds = multiclass_dataset(bags_per_class=8, targets=((2.0, 2.0), (8.0, 8.0)), seed=4)
    models = train_one_vs_all(ds, FAST)
    for c, (_, m) in enumerate(models):
        direct = train(binarize(ds, c), FAST)
        np.testing.assert_array_equal(decision_function(m, ds), decision_function(direct, ds))


def test_argmax_tie_goes_to_lowest_class():
    def const(v, idx):
        b = 2 * np.arctanh(v)
        m = model_with([BaseClassifier(np.zeros(1), b, 0.0)])
        m.metadata["class_index"] = idx
        return (f"c{idx}", m)

    models = [const(v, i) for i, v in enumerate([0.1, 0.2, 0.7, 0.3, 0.0, 0.7])]
    cls, margins = predict_multiclass(models, [[0.0]])
    assert margins[2] == margins[5]
    assert cls == 2


def test_one_vs_all_needs_multiclass(synthetic):
    with pytest.raises(DataError):
        train_one_vs_all(synthetic, FAST)


# ---------------------------------------------------------------------------
# persistence


def test_round_trip_is_exact(tmp_path, synthetic_model, synthetic):
    path = tmp_path / "m.json"
    save_model(synthetic_model, path)
    back = load_model(path)
    assert model_to_json(back) == path.read_text()
    for a, b in zip(back.base_classifiers, synthetic_model.base_classifiers):
        assert a.prototype.tobytes() == b.prototype.tobytes()
        assert (a.beta0, a.beta1) == (b.beta0, b.beta1)
    np.testing.assert_array_equal(decision_function(back, synthetic),
                                  decision_function(synthetic_model, synthetic))


def test_document_fields(synthetic_model):
    d = model_to_dict(synthetic_model)
    assert d["format"] == "misboost-model" and d["version"] == 1
    assert d["dimension"] == 2 and d["seed"] == FAST.seed
    assert "validation_curve" in d["metadata"]
    assert TrainConfig.from_dict(d["config"]) == FAST


def test_malformed_model_files(tmp_path, synthetic_model):
    p = tmp_path / "bad.json"
    p.write_text('{"format": "misboost-model",\n "version": 1,,}')
    with pytest.raises(ModelFormatError, match="line 2"):
        load_model(p)
    d = model_to_dict(synthetic_model)
    for key, val in [("format", "other"), ("version", 99), ("dimension", 7)]:
        bad = json.loads(json.dumps(d))
        bad[key] = val
        with pytest.raises(ModelFormatError):
            model_from_dict(bad)
    bad = json.loads(json.dumps(d))
    del bad["base_classifiers"]
    with pytest.raises(ModelFormatError):
        model_from_dict(bad)


# ---------------------------------------------------------------------------
# soft versus exact cost


def test_soft_exact_gap():
    from misboost.boosting import soft_exact_gap
    assert soft_exact_gap(0.5, 0.5) == 0.0
    assert soft_exact_gap(0.9, 1.0) == pytest.approx(0.1)
    assert soft_exact_gap(1e-9, 3e-9) == 0.0


def test_exact_costs_recorded(synthetic_model):
    soft = synthetic_model.metadata["stage_costs"]
    exact = synthetic_model.metadata["stage_exact_costs"]
    assert len(soft) == len(exact) == synthetic_model.n_stages
    assert all(0.0 <= e <= 4.0 for e in exact)


def test_small_alpha_warns(synthetic, caplog):
    with caplog.at_level(logging.WARNING):
        train(synthetic, TrainConfig(k=4, max_stages=1, alpha=0.05))
    assert "soft and exact" in caplog.text
