import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pcgseg.baselines import (
    Standardizer,
    balanced_weights,
    cross_validate,
    default_lambda_grid,
    fit_pipeline,
    lambda_max,
    lasso_select,
    load_pipeline,
    logistic_objective,
    predict_knn,
    save_pipeline,
    stepwise_select,
    stratified_folds,
    train_decision_tree,
    train_gaussian_nb,
    train_knn,
    train_linear_svm,
    train_logistic,
    train_random_forest,
)


def _informative(seed=0, n=120, noise=9):
    rng = np.random.default_rng(seed)
    y = np.repeat([0, 1], n // 2)
    signal = (2 * y - 1) * 1.5 + rng.normal(size=n)
    X = np.column_stack([signal, rng.normal(size=(n, noise))])
    return X, y


# ---------------------------------------------------------------- logistic


def test_logistic_separates_1d():
    m = train_logistic([[-1.0], [1.0]], [0, 1])
    assert m.predict([[-1.0], [1.0]]).tolist() == [0, 1]


def test_logistic_bias_gradient_at_origin():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(30, 3))
    y = (rng.random(30) < 0.3).astype(int)
    c = np.ones(30)
    h = 1e-6
    num = (logistic_objective(np.zeros(3), h, X, y, c, 0, 0) - logistic_objective(np.zeros(3), -h, X, y, c, 0, 0)) / (2 * h)
    assert num == pytest.approx(np.mean(0.5 - y), abs=1e-8)


def test_large_l1_zeroes_weights():
    X, y = _informative()
    m = train_logistic(Standardizer.fit(X).transform(X), y, l1=1e3)
    assert np.all(m.weights == 0)


def test_logistic_reaches_stationarity():
    X, y = _informative(1)
    Xs = Standardizer.fit(X).transform(X)
    m = train_logistic(Xs, y, l2=0.01)
    # oracle: central differences of the objective vanish at the optimum
    c = np.ones(len(y))
    theta = np.append(m.weights, m.bias)
    for j in range(len(theta)):
        e = np.zeros_like(theta)
        e[j] = 1e-6
        f = lambda t: logistic_objective(t[:-1], t[-1], Xs, y, c, 0.0, 0.01)  # noqa: E731
        assert abs((f(theta + e) - f(theta - e)) / 2e-6) < 1e-5


def test_logistic_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        train_logistic([[np.nan], [1.0]], [0, 1])


@pytest.mark.parametrize("r", [2, 3])
def test_logistic_replication_equals_weighting(r):
    X, y = _informative(2, n=60, noise=2)
    Xs = Standardizer.fit(X).transform(X)
    rep = np.concatenate([np.arange(60)] + [np.flatnonzero(y == 1)] * (r - 1))
    a = train_logistic(Xs[rep], y[rep], l2=1e-3)
    b = train_logistic(Xs, y, l2=1e-3, class_weights={0: 1.0, 1: float(r)})
    grid = np.random.default_rng(9).normal(size=(50, 3))
    assert np.max(np.abs(a.decision_function(grid) - b.decision_function(grid))) < 1e-6


# ---------------------------------------------------------------- SVM


def test_svm_separable_margin_two():
    X = np.array([[-1.0], [-2.0], [1.0], [2.0]])
    m = train_linear_svm(X, [0, 0, 1, 1], cost=1.0)
    assert m.predict(X).tolist() == [0, 0, 1, 1]


def test_svm_zero_cost():
    X, y = _informative()
    assert np.all(train_linear_svm(X, y, cost=0.0).weights == 0)


def test_svm_duplication_equals_double_weight():
    X, y = _informative(3, n=40, noise=2)
    Xs = Standardizer.fit(X).transform(X)
    rep = np.concatenate([np.arange(40), np.flatnonzero(y == 1)])
    a = train_linear_svm(Xs[rep], y[rep], cost=0.5)
    b = train_linear_svm(Xs, y, cost=0.5, class_weights={1: 2.0})
    grid = np.random.default_rng(4).normal(size=(50, 3))
    assert np.max(np.abs(a.decision_function(grid) - b.decision_function(grid))) < 1e-6


# ---------------------------------------------------------------- nb, knn, trees


def test_knn_single_neighbour():
    m = train_knn([[0.0, 0.0], [5.0, 5.0], [1.0, 0.0]], [0, 1, 1], k=1)
    assert predict_knn(m, [0.9, 0.1]) == 1
    assert predict_knn(m, [-1.0, 0.0]) == 0
    assert predict_knn(m, [4.0, 4.0], k=3) == 1


def test_knn_k_too_large():
    with pytest.raises(ValueError):
        train_knn([[0.0], [1.0]], [0, 1], k=3)


def test_nb_symmetric_classes():
    rng = np.random.default_rng(5)
    z = rng.normal(0, 1, 200)
    z -= z.mean()
    # mirrored classes: equal spreads, means 0 and 10, boundary exactly at 5
    X = np.concatenate([z, 10.0 - z])[:, None]
    y = np.repeat([0, 1], 200)
    m = train_gaussian_nb(X, y)
    assert m.predict([[5.0 + 1e-6]]).tolist() == [1]
    assert m.predict([[5.0 - 1e-3]]).tolist() == [0]
    assert np.all(m.sds >= 1e-6)


def test_nb_needs_both_classes():
    with pytest.raises(ValueError, match="no training rows"):
        train_gaussian_nb([[1.0], [2.0]], [0, 0])


def test_tree_axis_aligned_split():
    x = np.array([-3.0, -2.0, -0.5, 0.5, 1.0, 4.0])
    t = train_decision_tree(x[:, None], (x >= 0).astype(int), max_depth=3)
    assert t.depth() == 1
    assert t.root.threshold == pytest.approx(0.0)
    assert t.predict(x[:, None]).tolist() == [0, 0, 0, 1, 1, 1]


def test_tree_respects_max_depth(rng):
    X = rng.normal(size=(200, 4))
    y = (np.sin(3 * X[:, 0]) + X[:, 1] ** 2 > 0.7).astype(int)
    for d in (0, 1, 2, 4):
        assert train_decision_tree(X, y, max_depth=d).depth() <= d


def test_forest_single_full_tree_equals_tree(rng):
    X = rng.normal(size=(80, 5))
    y = (X[:, 0] + 0.5 * X[:, 3] > 0).astype(int)
    f = train_random_forest(X, y, n_estimators=1, max_features="all", seed=7, max_depth=4, bootstrap=False)
    t = train_decision_tree(X, y, max_depth=4)
    grid = rng.normal(size=(200, 5))
    assert np.array_equal(f.predict(grid), t.predict(grid))
    assert len(train_random_forest(X, y, n_estimators=6, seed=1).trees) == 6


def test_forest_is_seeded(rng):
    X = rng.normal(size=(60, 6))
    y = (X[:, 0] > 0).astype(int)
    a = train_random_forest(X, y, 5, "sqrt", seed=3).to_dict()
    b = train_random_forest(X, y, 5, "sqrt", seed=3).to_dict()
    assert json.dumps(a) == json.dumps(b)


# ---------------------------------------------------------------- selection


def test_forward_picks_informative_first():
    X, y = _informative(0)
    assert stepwise_select("forward", X, y, max_features=1) == [0]
    assert 0 in stepwise_select("forward", X, y)


def test_backward_keeps_jointly_needed_features():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 200))
    y = (a + b > 0).astype(int)
    assert stepwise_select("backward", np.column_stack([a, b]), y) == [0, 1]


def test_forward_stops_on_empty_when_nothing_helps():
    y = np.repeat([0, 1], 30)
    assert stepwise_select("forward", np.ones((60, 3)), y) == []


def test_lasso_large_lambda_empty():
    X, y = _informative()
    subset, lam = lasso_select(X, y, [1e3])
    assert subset == [] and lam == 1e3


def test_lasso_keeps_informative_feature():
    X, y = _informative()
    subset, lam = lasso_select(X, y)
    assert 0 in subset
    assert len(subset) <= X.shape[1]


def test_lasso_duplicate_columns_bound():
    X, y = _informative(noise=1)
    X = np.column_stack([X, X[:, 0]])
    subset, _ = lasso_select(X, y)
    assert len(subset) <= 3


def test_lambda_max_is_exact_threshold():
    X, y = _informative(4)
    Xs = Standardizer.fit(X).transform(X)
    cw = balanced_weights(y)
    top = lambda_max(Xs, y, cw)
    assert np.all(train_logistic(Xs, y, l1=top * 1.001, class_weights=cw).weights == 0)
    assert np.any(train_logistic(Xs, y, l1=top * 0.9, class_weights=cw).weights != 0)
    grid = default_lambda_grid(Xs, y, cw)
    assert len(grid) == 20 and grid[0] == pytest.approx(top) and grid[-1] == pytest.approx(top / 100)


def test_lasso_requires_grid_entries():
    X, y = _informative()
    with pytest.raises(ValueError):
        lasso_select(X, y, [])


# ---------------------------------------------------------------- CV


@given(st.integers(20, 120), st.floats(0.1, 0.5), st.integers(0, 1000))
def test_folds_are_stratified(n, frac, seed):
    n_abn = max(10, int(n * frac))
    y = np.array([1] * n_abn + [0] * max(10, n - n_abn))
    folds = stratified_folds(y, 10, seed)
    share = y.mean()
    for k in range(10):
        fold = y[folds == k]
        assert abs(fold.sum() - share * len(fold)) <= 1 + 1e-9


def test_folds_need_ten_per_class():
    with pytest.raises(ValueError, match="stratification"):
        stratified_folds([0] * 20 + [1] * 9)


def test_constant_learner_cv():
    rng = np.random.default_rng(8)
    X = rng.normal(size=(40, 2))
    y = np.repeat([0, 1], 20)
    rep = cross_validate("tree", X, y, {"max_depth": [0]}, seed=1)
    assert rep.mean["accuracy"] == 0.5
    assert rep.mean["sensitivity"] in (0.0, 1.0)
    assert rep.mean["specificity"] == 1.0 - rep.mean["sensitivity"]
    assert len(rep.folds) == 10


def test_cv_is_deterministic():
    X, y = _informative(5, n=60, noise=3)
    a = cross_validate("logistic", X, y, {"l2": [0.0, 0.1]}, seed=2).to_dict()
    b = cross_validate("logistic", X, y, {"l2": [0.0, 0.1]}, seed=2).to_dict()
    assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def test_separable_cv_accuracy():
    rng = np.random.default_rng(9)
    y = np.repeat([0, 1], 50)
    X = np.column_stack([(2 * y - 1) * 3 + rng.normal(0, 0.5, 100), rng.normal(size=100)])
    assert cross_validate("logistic", X, y, seed=0).mean["accuracy"] >= 0.95


def test_balanced_weights():
    assert balanced_weights([0, 0, 0, 0, 1]) == {0: 1.0, 1: 4.0}


# ---------------------------------------------------------------- pipelines


def test_standardization_uses_training_rows_only(rng):
    X = rng.normal(2.0, 3.0, size=(50, 4))
    y = (X[:, 0] > 2).astype(int)
    pipe = fit_pipeline("logistic", X, y)
    ref = Standardizer.fit(X)
    assert np.allclose(pipe.standardizer.mean, ref.mean, rtol=1e-14)
    assert np.allclose(pipe.standardizer.sd, ref.sd, rtol=1e-14)
    before = pipe.scores(X[:5]).copy()
    pipe.scores(rng.normal(size=(10, 4)) * 1e6)
    assert np.array_equal(pipe.scores(X[:5]), before)


@pytest.mark.parametrize("learner", ["logistic", "svm", "tree", "forest", "knn", "nb"])
def test_pipeline_json_round_trip(tmp_path, learner, rng):
    X = rng.normal(size=(40, 5))
    y = (X[:, 1] - X[:, 2] > 0).astype(int)
    pipe = fit_pipeline(learner, X, y, subset=[1, 2, 4], seed=3)
    p = tmp_path / "m.json"
    save_pipeline(p, pipe)
    back = load_pipeline(p)
    grid = rng.normal(size=(30, 5))
    assert np.array_equal(back.predict(grid), pipe.predict(grid))
    assert np.allclose(back.scores(grid), pipe.scores(grid))
