"""Traditional classifiers, feature selection and stratified cross-validation.

All trainers are deterministic functions of their inputs and seed. Labels
are 0 (normal) / 1 (abnormal). Class weights are a ``{label: weight}``
mapping; ``None`` means unit weights.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import evaluate

ClassWeights = Optional[Dict[int, float]]


def _check_xy(X, y):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one row per label")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain non-finite values")
    if not np.all(np.isin(y, (0, 1))):
        raise ValueError("labels must be 0 (normal) or 1 (abnormal)")
    return X, y


def sample_weights(y: np.ndarray, class_weights: ClassWeights) -> np.ndarray:
    if class_weights is None:
        return np.ones(len(y))
    return np.array([float(class_weights.get(int(c), 1.0)) for c in y])


def balanced_weights(y) -> Dict[int, float]:
    """Abnormal weight = #normal / #abnormal; normal weight 1."""
    y = np.asarray(y)
    n_abn = int(np.sum(y == 1))
    return {0: 1.0, 1: (int(np.sum(y == 0)) / n_abn) if n_abn else 1.0}


@dataclass
class Standardizer:
    mean: np.ndarray
    sd: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        sd = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(sd > 1e-12, sd, 1.0))

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.sd


# ---------------------------------------------------------------- linear models


@dataclass
class LinearModel:
    weights: np.ndarray
    bias: float
    feature_subset: List[int]
    kind: str  # "logistic" | "linear_svm"
    hyperparameters: dict = field(default_factory=dict)

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.weights + self.bias

    def scores(self, X) -> np.ndarray:
        z = self.decision_function(X)
        return _sigmoid(z) if self.kind == "logistic" else z

    def predict(self, X) -> np.ndarray:
        return (self.decision_function(X) > 0).astype(int)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "weights": self.weights.tolist(), "bias": self.bias,
                "feature_subset": list(self.feature_subset), "hyperparameters": self.hyperparameters}


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def logistic_objective(w, b, X, y, c, l1, l2) -> float:
    z = X @ w + b
    # log(1 + e^z) - y z, stable
    ce = np.logaddexp(0.0, z) - y * z
    return float(np.sum(c * ce) / np.sum(c) + l1 * np.sum(np.abs(w)) + l2 * np.sum(w * w))


def train_logistic(X, y, l1: float = 0.0, l2: float = 0.0, class_weights: ClassWeights = None,
                   max_iter: int = 10000, tol: float = 1e-6) -> LinearModel:
    """Weighted cross-entropy + ``l1 * |w|_1 + l2 * |w|_2^2`` by accelerated proximal gradient.

    The data term is the class-weighted mean of per-row cross-entropy, so
    replicating a row ``r`` times equals giving it weight ``r``. Stops when
    the gradient mapping's max-norm drops below ``tol``.
    """
    X, y = _check_xy(X, y)
    if l1 < 0 or l2 < 0:
        raise ValueError("regularization coefficients must be non-negative")
    n, p = X.shape
    c = sample_weights(y, class_weights)
    cn = c / c.sum()
    A = np.hstack([X, np.ones((n, 1))])
    lip = 0.25 * np.linalg.norm(A * np.sqrt(cn)[:, None], 2) ** 2 + 2 * l2
    step = 1.0 / max(lip, 1e-12)
    theta = np.zeros(p + 1)
    momentum = theta.copy()
    t_k = 1.0

    def grad(th):
        r = cn * (_sigmoid(A @ th) - y)
        g = A.T @ r
        g[:p] += 2 * l2 * th[:p]
        return g

    def prox(th):
        out = th.copy()
        out[:p] = np.sign(th[:p]) * np.maximum(np.abs(th[:p]) - step * l1, 0.0)
        return out

    def objective(th):
        return logistic_objective(th[:p], th[p], X, y, c, l1, l2)

    f_prev = objective(theta)
    for _ in range(max_iter):
        new = prox(momentum - step * grad(momentum))
        f_new = objective(new)
        if f_new > f_prev:
            # restart acceleration from the last iterate
            momentum, t_k = theta.copy(), 1.0
            new = prox(theta - step * grad(theta))
            f_new = objective(new)
        mapping = (theta - prox(theta - step * grad(theta))) / step
        if np.max(np.abs(mapping)) < tol:
            break
        t_next = (1 + math.sqrt(1 + 4 * t_k * t_k)) / 2
        momentum = new + ((t_k - 1) / t_next) * (new - theta)
        theta, t_k, f_prev = new, t_next, f_new
    return LinearModel(theta[:p].copy(), float(theta[p]), list(range(p)), "logistic", {"l1": l1, "l2": l2})


def svm_objective(w, b, X, y, c, cost) -> float:
    s = 2 * y - 1
    hinge = np.maximum(0.0, 1.0 - s * (X @ w + b))
    return float(0.5 * w @ w + cost * np.sum(c * hinge))


def train_linear_svm(X, y, cost: float = 1.0, class_weights: ClassWeights = None, epochs: int = 200) -> LinearModel:
    """``0.5 |w|^2 + cost * sum(weight * hinge)`` by full-batch subgradient descent, step 1/t.

    Returns the iterate with the lowest objective.
    """
    X, y = _check_xy(X, y)
    if cost < 0:
        raise ValueError("cost must be non-negative")
    n, p = X.shape
    c = sample_weights(y, class_weights)
    s = 2 * y - 1
    w, b = np.zeros(p), 0.0
    best = (svm_objective(w, b, X, y, c, cost), w.copy(), b)
    for t in range(1, epochs + 1):
        active = (s * (X @ w + b)) < 1.0
        coef = cost * c * s * active
        gw = w - X.T @ coef
        gb = -np.sum(coef)
        eta = 1.0 / t
        w = w - eta * gw
        b = b - eta * gb
        f = svm_objective(w, b, X, y, c, cost)
        if f < best[0]:
            best = (f, w.copy(), b)
    return LinearModel(best[1], float(best[2]), list(range(p)), "linear_svm", {"cost": cost})


# ---------------------------------------------------------------- naive Bayes, kNN


@dataclass
class NbModel:
    means: np.ndarray  # (2, features)
    sds: np.ndarray
    log_priors: np.ndarray

    def _joint(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z = (X[:, None, :] - self.means[None]) / self.sds[None]
        return self.log_priors[None] + np.sum(-0.5 * z**2 - np.log(self.sds)[None], axis=2)

    def scores(self, X) -> np.ndarray:
        j = self._joint(X)
        return _sigmoid(j[:, 1] - j[:, 0])

    def predict(self, X) -> np.ndarray:
        j = self._joint(X)
        return (j[:, 1] > j[:, 0]).astype(int)

    def to_dict(self) -> dict:
        return {"kind": "nb", "means": self.means.tolist(), "sds": self.sds.tolist(), "log_priors": self.log_priors.tolist()}


def train_gaussian_nb(X, y, class_weights: ClassWeights = None) -> NbModel:
    X, y = _check_xy(X, y)
    means, sds, priors = [], [], []
    for cls in (0, 1):
        rows = X[y == cls]
        if len(rows) == 0:
            raise ValueError(f"class {cls} has no training rows")
        means.append(rows.mean(axis=0))
        sds.append(np.maximum(rows.std(axis=0), 1e-6))
        priors.append(len(rows) * (1.0 if class_weights is None else class_weights.get(cls, 1.0)))
    priors = np.array(priors) / np.sum(priors)
    return NbModel(np.array(means), np.array(sds), np.log(priors))


@dataclass
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    k: int

    def _neighbours(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        d2 = np.sum((X[:, None, :] - self.X[None]) ** 2, axis=2)
        return np.argsort(d2, axis=1, kind="stable")[:, : self.k]

    def scores(self, X) -> np.ndarray:
        return self.y[self._neighbours(X)].mean(axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.scores(X) > 0.5).astype(int)

    def to_dict(self) -> dict:
        return {"kind": "knn", "k": self.k, "X": self.X.tolist(), "y": self.y.tolist()}


def train_knn(X, y, k: int = 5) -> KnnModel:
    X, y = _check_xy(X, y)
    if k < 1 or k > len(X):
        raise ValueError(f"k must lie in [1, {len(X)}], got {k}")
    return KnnModel(X.copy(), y.copy(), int(k))


def predict_knn(model: KnnModel, x, k: Optional[int] = None) -> int:
    """Majority label among the ``k`` nearest training rows (Euclidean)."""
    if k is not None and k != model.k:
        if k < 1 or k > len(model.X):
            raise ValueError(f"k must lie in [1, {len(model.X)}], got {k}")
        model = KnnModel(model.X, model.y, k)
    return int(model.predict(np.atleast_2d(x))[0])


# ---------------------------------------------------------------- trees


@dataclass
class TreeNode:
    counts: Tuple[float, float]
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def abnormal_fraction(self) -> float:
        tot = self.counts[0] + self.counts[1]
        return self.counts[1] / tot if tot else 0.0

    def to_dict(self) -> dict:
        d = {"counts": list(self.counts)}
        if not self.is_leaf:
            d.update(feature=self.feature, threshold=self.threshold, left=self.left.to_dict(), right=self.right.to_dict())
        return d

    @classmethod
    def from_dict(cls, d) -> "TreeNode":
        if "feature" not in d:
            return cls(tuple(d["counts"]))
        return cls(tuple(d["counts"]), d["feature"], d["threshold"], cls.from_dict(d["left"]), cls.from_dict(d["right"]))


def _gini(w0, w1):
    tot = w0 + w1
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(tot > 0, 1.0 - (w0 / tot) ** 2 - (w1 / tot) ** 2, 0.0)


def _best_split(X, y, c, features):
    w0_tot = np.sum(c * (y == 0))
    w1_tot = np.sum(c * (y == 1))
    tot = w0_tot + w1_tot
    parent = float(_gini(w0_tot, w1_tot))
    best = (0.0, -1, 0.0)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        xs, ys, cs = X[order, f], y[order], c[order]
        w0 = np.cumsum(cs * (ys == 0))[:-1]
        w1 = np.cumsum(cs * (ys == 1))[:-1]
        valid = xs[1:] > xs[:-1]
        if not np.any(valid):
            continue
        left = w0 + w1
        child = (left * _gini(w0, w1) + (tot - left) * _gini(w0_tot - w0, w1_tot - w1)) / tot
        gain = np.where(valid, parent - child, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0] + 1e-12:
            best = (float(gain[i]), int(f), float((xs[i] + xs[i + 1]) / 2))
    return best


@dataclass
class TreeModel:
    root: TreeNode
    max_depth: int

    def _leaf(self, x) -> TreeNode:
        node = self.root
        while not node.is_leaf:
            node = node.left if x[node.feature] <= node.threshold else node.right
        return node

    def scores(self, X) -> np.ndarray:
        return np.array([self._leaf(x).abnormal_fraction for x in np.atleast_2d(X)])

    def predict(self, X) -> np.ndarray:
        return np.array([int(self._leaf(x).counts[1] > self._leaf(x).counts[0]) for x in np.atleast_2d(X)])

    def depth(self) -> int:
        def rec(n):
            return 0 if n.is_leaf else 1 + max(rec(n.left), rec(n.right))
        return rec(self.root)

    def to_dict(self) -> dict:
        return {"kind": "tree", "max_depth": self.max_depth, "root": self.root.to_dict()}


def _grow(X, y, c, depth, max_depth, rng, max_features):
    counts = (float(np.sum(c * (y == 0))), float(np.sum(c * (y == 1))))
    node = TreeNode(counts)
    if depth >= max_depth or counts[0] == 0 or counts[1] == 0 or len(y) < 2:
        return node
    p = X.shape[1]
    if max_features is None or max_features >= p:
        features = range(p)
    else:
        features = np.sort(rng.choice(p, size=max_features, replace=False))
    gain, f, thr = _best_split(X, y, c, features)
    if f < 0:
        return node
    go_left = X[:, f] <= thr
    node.feature, node.threshold = f, thr
    node.left = _grow(X[go_left], y[go_left], c[go_left], depth + 1, max_depth, rng, max_features)
    node.right = _grow(X[~go_left], y[~go_left], c[~go_left], depth + 1, max_depth, rng, max_features)
    return node


def train_decision_tree(X, y, max_depth: int = 5, class_weights: ClassWeights = None,
                        max_features: Optional[int] = None, rng=None) -> TreeModel:
    """CART with weighted Gini impurity and midpoint thresholds."""
    X, y = _check_xy(X, y)
    if max_depth < 0:
        raise ValueError("max_depth must be non-negative")
    c = sample_weights(y, class_weights)
    rng = rng if rng is not None else np.random.default_rng(0)
    return TreeModel(_grow(X, y, c, 0, max_depth, rng, max_features), max_depth)


@dataclass
class ForestModel:
    trees: List[TreeModel]
    seed: int
    max_features: Optional[int]

    def scores(self, X) -> np.ndarray:
        return np.mean([t.predict(X) for t in self.trees], axis=0)

    def predict(self, X) -> np.ndarray:
        return (self.scores(X) > 0.5).astype(int)

    def to_dict(self) -> dict:
        return {"kind": "forest", "seed": self.seed, "max_features": self.max_features,
                "trees": [t.to_dict() for t in self.trees]}


def _resolve_max_features(max_features, p):
    if max_features in (None, "all"):
        return None
    if max_features == "sqrt":
        return max(1, int(round(math.sqrt(p))))
    return int(max_features)


def train_random_forest(X, y, n_estimators: int = 100, max_features=None, seed: int = 0, max_depth: int = 10,
                        class_weights: ClassWeights = None, bootstrap: bool = True) -> ForestModel:
    """Bagged CART trees with per-split uniform feature subsampling and majority vote."""
    X, y = _check_xy(X, y)
    if n_estimators < 1:
        raise ValueError("n_estimators must be positive")
    mf = _resolve_max_features(max_features, X.shape[1])
    trees = []
    for i in range(n_estimators):
        rng = np.random.default_rng([seed, i])
        idx = rng.integers(0, len(X), len(X)) if bootstrap else np.arange(len(X))
        trees.append(train_decision_tree(X[idx], y[idx], max_depth, class_weights, mf, rng))
    return ForestModel(trees, seed, mf)


# ---------------------------------------------------------------- pipelines and CV

LEARNERS = ("logistic", "svm", "tree", "forest", "knn", "nb")


def train_model(learner: str, X, y, params: Optional[dict] = None, class_weights: ClassWeights = None, seed: int = 0):
    params = dict(params or {})
    if learner == "logistic":
        return train_logistic(X, y, params.get("l1", 0.0), params.get("l2", 0.0), class_weights)
    if learner == "svm":
        return train_linear_svm(X, y, params.get("cost", 1.0), class_weights)
    if learner == "tree":
        return train_decision_tree(X, y, params.get("max_depth", 5), class_weights)
    if learner == "forest":
        return train_random_forest(X, y, params.get("n_estimators", 50), params.get("max_features", "sqrt"),
                                   seed, params.get("max_depth", 10), class_weights)
    if learner == "knn":
        return train_knn(X, y, params.get("k", 5))
    if learner == "nb":
        return train_gaussian_nb(X, y, class_weights)
    raise ValueError(f"unknown learner {learner!r}; choose from {', '.join(LEARNERS)}")


@dataclass
class FittedPipeline:
    """Column subset -> standardization (training statistics) -> model."""

    learner: str
    subset: List[int]
    standardizer: Standardizer
    model: object
    params: dict

    def _prep(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))[:, self.subset]
        return self.standardizer.transform(X)

    def scores(self, X) -> np.ndarray:
        return self.model.scores(self._prep(X))

    def predict(self, X) -> np.ndarray:
        return self.model.predict(self._prep(X))

    def to_dict(self) -> dict:
        return {"learner": self.learner, "hyperparameters": self.params, "feature_subset": list(self.subset),
                "standardization": {"mean": self.standardizer.mean.tolist(), "sd": self.standardizer.sd.tolist()},
                "model": self.model.to_dict()}


def fit_pipeline(learner: str, X, y, params: Optional[dict] = None, subset: Optional[Sequence[int]] = None,
                 weighting: bool = True, seed: int = 0) -> FittedPipeline:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    subset = list(range(X.shape[1])) if subset is None else list(subset)
    Xs = X[:, subset]
    std = Standardizer.fit(Xs)
    cw = balanced_weights(y) if weighting else None
    model = train_model(learner, std.transform(Xs), y, params, cw, seed)
    return FittedPipeline(learner, subset, std, model, dict(params or {}))


def pipeline_from_dict(d: dict) -> FittedPipeline:
    m = d["model"]
    kind = m["kind"]
    if kind in ("logistic", "linear_svm"):
        model = LinearModel(np.array(m["weights"]), m["bias"], m["feature_subset"], kind, m.get("hyperparameters", {}))
    elif kind == "nb":
        model = NbModel(np.array(m["means"]), np.array(m["sds"]), np.array(m["log_priors"]))
    elif kind == "knn":
        model = KnnModel(np.array(m["X"]), np.array(m["y"], dtype=int), m["k"])
    elif kind == "tree":
        model = TreeModel(TreeNode.from_dict(m["root"]), m["max_depth"])
    elif kind == "forest":
        model = ForestModel([TreeModel(TreeNode.from_dict(t["root"]), t["max_depth"]) for t in m["trees"]],
                            m["seed"], m["max_features"])
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    std = Standardizer(np.array(d["standardization"]["mean"]), np.array(d["standardization"]["sd"]))
    return FittedPipeline(d["learner"], list(d["feature_subset"]), std, model, d.get("hyperparameters", {}))


def save_pipeline(path, pipe: FittedPipeline) -> None:
    with open(path, "w") as fh:
        json.dump(pipe.to_dict(), fh, indent=1)


def load_pipeline(path) -> FittedPipeline:
    with open(path) as fh:
        return pipeline_from_dict(json.load(fh))


def stratified_folds(y, n_folds: int = 10, seed: int = 0) -> np.ndarray:
    """Fold index per row; each class is shuffled and dealt round-robin."""
    y = np.asarray(y, dtype=int)
    for cls in (0, 1):
        if np.sum(y == cls) < n_folds:
            raise ValueError(f"class {cls} has {int(np.sum(y == cls))} rows; need at least {n_folds} for {n_folds}-fold stratification")
    rng = np.random.default_rng(seed)
    folds = np.empty(len(y), dtype=int)
    offset = 0
    for cls in (0, 1):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        folds[idx] = (np.arange(len(idx)) + offset) % n_folds
        offset += len(idx)
    return folds


def cv_accuracy(learner, X, y, params=None, subset=None, folds=None, weighting=True, seed=0) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    folds = stratified_folds(y, seed=seed) if folds is None else folds
    subset = list(range(X.shape[1])) if subset is None else list(subset)
    correct = 0
    for k in range(int(folds.max()) + 1):
        tr, te = folds != k, folds == k
        if subset:
            pipe = fit_pipeline(learner, X[tr], y[tr], params, subset, weighting, seed)
            correct += int(np.sum(pipe.predict(X[te]) == y[te]))
        else:
            correct += int(np.sum(_intercept_only(y[tr], weighting, te.sum()) == y[te]))
    return correct / len(y)


def _intercept_only(y_train, weighting, n):
    """Prediction of a featureless model: the class with the larger weighted mass."""
    cw = balanced_weights(y_train) if weighting else {0: 1.0, 1: 1.0}
    mass0 = np.sum(y_train == 0) * cw[0]
    mass1 = np.sum(y_train == 1) * cw[1]
    return np.full(n, int(mass1 > mass0))


def stepwise_select(direction: str, X, y, params: Optional[dict] = None, learner: str = "logistic",
                    seed: int = 0, min_gain: float = 1e-4, max_features: Optional[int] = None) -> List[int]:
    """Greedy forward or backward selection by 10-fold CV accuracy; ties go to lower feature indices."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    p = X.shape[1]
    if direction not in ("forward", "backward"):
        raise ValueError("direction must be 'forward' or 'backward'")
    params = {"l2": 1e-3} if params is None and learner == "logistic" else params
    folds = stratified_folds(y, seed=seed)
    score = lambda s: cv_accuracy(learner, X, y, params, sorted(s), folds, True, seed)  # noqa: E731
    current = [] if direction == "forward" else list(range(p))
    cur_score = score(current)
    limit = p if max_features is None else max_features
    while True:
        if direction == "forward":
            if len(current) >= limit:
                break
            cands = [(f, current + [f]) for f in range(p) if f not in current]
        else:
            if not current:
                break
            cands = [(f, [g for g in current if g != f]) for f in current]
        best_s, best_subset = -1.0, None
        for _, subset in cands:
            s = score(subset)
            if s > best_s:
                best_s, best_subset = s, subset
        if best_subset is None or best_s <= cur_score + min_gain:
            break
        current, cur_score = best_subset, best_s
    return current if direction == "forward" else sorted(current)


def lambda_max(X, y, class_weights: ClassWeights = None) -> float:
    """Smallest l1 strength at which every weight of the logistic model is zero."""
    X, y = _check_xy(X, y)
    c = sample_weights(y, class_weights)
    cn = c / c.sum()
    # optimal intercept-only model predicts the weighted positive rate
    p0 = float(np.sum(cn * y))
    return float(np.max(np.abs(X.T @ (cn * (p0 - y)))))


def default_lambda_grid(X, y, class_weights: ClassWeights = None, n: int = 20, ratio: float = 0.01) -> List[float]:
    """``n`` log-spaced strengths from ``lambda_max`` down to ``ratio * lambda_max``."""
    top = lambda_max(X, y, class_weights)
    return [float(v) for v in top * np.logspace(0, np.log10(ratio), n)]


def lasso_select(X, y, lambda_grid: Optional[Sequence[float]] = None, seed: int = 0) -> Tuple[List[int], float]:
    """Pick the l1 strength with the lowest 10-fold CV misclassification (ties: larger lambda).

    Features are standardized and abnormal rows up-weighted as in
    :func:`fit_pipeline`. Without ``lambda_grid`` the default path is derived
    from the standardized data. Returns the non-zero-weight feature indices of
    the model refitted on all rows at the chosen strength, and that strength.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(Standardizer.fit(X).transform(X), y, balanced_weights(y))
    if len(lambda_grid) == 0:
        raise ValueError("lambda_grid must not be empty")
    folds = stratified_folds(y, seed=seed)
    best_lam, best_err = None, math.inf
    for lam in sorted(lambda_grid, reverse=True):
        err = 1.0 - cv_accuracy("logistic", X, y, {"l1": lam}, None, folds, True, seed)
        if err < best_err - 1e-12:
            best_lam, best_err = lam, err
    pipe = fit_pipeline("logistic", X, y, {"l1": best_lam})
    subset = [int(i) for i in np.flatnonzero(pipe.model.weights != 0)]
    return subset, float(best_lam)


@dataclass
class CvReport:
    learner: str
    hyperparameters: dict
    folds: List[dict]
    mean: dict
    grid_scores: List[Tuple[dict, float]]

    def to_dict(self) -> dict:
        return {"learner": self.learner, "hyperparameters": self.hyperparameters, "folds": self.folds,
                "mean": self.mean, "grid_scores": [{"params": p, "accuracy": a} for p, a in self.grid_scores]}


def _grid(grid: Optional[Dict[str, Sequence]]) -> List[dict]:
    if not grid:
        return [{}]
    keys = sorted(grid)
    return [dict(zip(keys, vals)) for vals in product(*(grid[k] for k in keys))]


def cross_validate(learner: str, X, y, grid: Optional[Dict[str, Sequence]] = None, seed: int = 0,
                   subset: Optional[Sequence[int]] = None, weighting: bool = True, n_folds: int = 10) -> CvReport:
    """Stratified k-fold grid search by mean accuracy; reports metrics of the best grid point."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=int)
    folds = stratified_folds(y, n_folds, seed)
    results = []
    for params in _grid(grid):
        fold_metrics = []
        for k in range(n_folds):
            tr, te = folds != k, folds == k
            pipe = fit_pipeline(learner, X[tr], y[tr], params, subset, weighting, seed)
            m = evaluate(pipe.predict(X[te]), y[te], pipe.scores(X[te]))
            fold_metrics.append(m.to_dict())
        acc = float(np.mean([m["accuracy"] for m in fold_metrics]))
        results.append((params, acc, fold_metrics))
    best = max(results, key=lambda r: r[1])  # first maximum wins
    mean = {}
    for key in ("accuracy", "sensitivity", "specificity", "ppv", "auc"):
        vals = [m[key] for m in best[2] if m[key] is not None]
        mean[key] = float(np.mean(vals)) if vals else None
    return CvReport(learner, best[0], best[2], mean, [(p, a) for p, a, _ in results])
