"""Randomized tree ensembles over the CART core.

Random forest: bootstrap resampling, per-split feature subsets of size
floor(sqrt(p)), score = mean of per-tree positive-class probabilities.

Stochastic gradient boosting: logistic loss on +1/-1 labels, regression trees
on pseudo-residuals over row subsamples drawn without replacement, a doubling
line search for the step length, and a full-training-set guard that skips any
step that would increase the loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .trees import Tree, TreeParams, _column_codes, fit_tree
from .util import derive_seed, logistic_loss, sigmoid


def _check_two_classes(y):
    y = np.asarray(y)
    if not np.isin(y, (-1, 1)).all():
        raise DataError("labels must be -1/+1")
    if (y == 1).all() or (y == -1).all():
        raise DataError("need both classes present, got a single-class y")
    return y


# ---------------------------------------------------------------------------
# random forest


@dataclass
class ForestParams:
    n_trees: int = 25
    features_per_split: int | None = None  # None: floor(sqrt(p)), min 1
    bootstrap: bool = True
    seed: int = 0


@dataclass
class RandomForest:
    trees: list
    n_features: int
    params: ForestParams

    def to_state(self) -> dict:
        return {
            "n_features": int(self.n_features),
            "n_trees": int(self.params.n_trees),
            "features_per_split": self.params.features_per_split,
            "bootstrap": bool(self.params.bootstrap),
            "seed": int(self.params.seed),
            "trees": [t.to_state() for t in self.trees],
        }

    @classmethod
    def from_state(cls, state: dict) -> "RandomForest":
        params = ForestParams(
            n_trees=state["n_trees"],
            features_per_split=state["features_per_split"],
            bootstrap=state["bootstrap"],
            seed=state["seed"],
        )
        return cls([Tree.from_state(s) for s in state["trees"]], state["n_features"], params)


def fit_random_forest(X, y, params: ForestParams) -> RandomForest:
    X = np.asarray(X, dtype=float)
    y = _check_two_classes(y)
    n, p = X.shape
    if params.n_trees < 1:
        raise DataError("n_trees must be >= 1")
    k = params.features_per_split
    if k is None:
        k = max(1, math.isqrt(p))
    min_leaf = max(2, n // 64)
    codes, values, kdist = _column_codes(X)
    trees = []
    for t in range(params.n_trees):
        rng = np.random.default_rng(derive_seed(params.seed, "rf-tree", t))
        rows = rng.integers(0, n, size=n) if params.bootstrap else np.arange(n)
        tree_params = TreeParams(
            task="classification", min_leaf_rows=min_leaf, features_per_split=k
        )
        trees.append(
            fit_tree(X[rows], y[rows], tree_params, rng=rng,
                     binned=(codes[rows], values, kdist))
        )
    return RandomForest(trees, p, params)


def predict_forest(forest: RandomForest, X) -> np.ndarray:
    """Mean of per-tree positive-class probabilities."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    scores = np.zeros(X.shape[0])
    for t in forest.trees:
        scores += t.predict(X)
    return scores / len(forest.trees)


def forest_labels(scores) -> np.ndarray:
    """+1 iff score >= 0.5; the tie at exactly 0.5 goes positive."""
    return np.where(np.asarray(scores) >= 0.5, 1, -1)


# ---------------------------------------------------------------------------
# stochastic gradient boosting


@dataclass
class GbmParams:
    n_rounds: int = 200
    subsample: float = 0.5  # fraction of rows drawn without replacement
    lr_start: float = 0.001
    lr_cap: float = 0.1
    seed: int = 0


@dataclass
class GbmStep:
    lam: float
    tree: Tree
    features: np.ndarray  # column subset the learner was fit on


@dataclass
class GbmModel:
    intercept: float
    steps: list
    n_features: int
    loss_history: list = field(default_factory=list)  # train loss, rounds 0..T

    def to_state(self) -> dict:
        return {
            "intercept": float(self.intercept),
            "n_features": int(self.n_features),
            "loss_history": [float(v) for v in self.loss_history],
            "steps": [
                {
                    "lam": float(s.lam),
                    "features": [int(i) for i in s.features],
                    "tree": s.tree.to_state(),
                }
                for s in self.steps
            ],
        }

    @classmethod
    def from_state(cls, state: dict) -> "GbmModel":
        steps = [
            GbmStep(s["lam"], Tree.from_state(s["tree"]), np.array(s["features"], dtype=int))
            for s in state["steps"]
        ]
        return cls(state["intercept"], steps, state["n_features"], list(state["loss_history"]))


def gbm_pseudo_residuals(y, F) -> np.ndarray:
    """Negative gradient of the logistic loss: y / (1 + exp(y * F))."""
    y = np.asarray(y, dtype=float)
    F = np.asarray(F, dtype=float)
    return y * sigmoid(-y * F)


def lr_schedule(lr_start: float, lr_cap: float) -> list:
    """Doubling candidates from lr_start, final candidate clipped to the cap."""
    if lr_start >= lr_cap:
        return [lr_cap]
    seq = [lr_start]
    v = lr_start * 2.0
    while v < lr_cap:
        seq.append(v)
        v *= 2.0
    seq.append(lr_cap)
    return seq


def line_search_step(tree: Tree, X_sub, y_sub, F_sub, lr_start=0.001, lr_cap=0.1) -> float:
    """Largest candidate whose subsample loss strictly improves on the
    previous candidate's; the walk stops at the first non-improvement."""
    h = tree.predict(X_sub)
    y = np.asarray(y_sub, dtype=float)
    F = np.asarray(F_sub, dtype=float)
    candidates = lr_schedule(lr_start, lr_cap)
    best = candidates[0]
    prev = logistic_loss(y * (F + best * h))
    for lam in candidates[1:]:
        cur = logistic_loss(y * (F + lam * h))
        if cur < prev:
            best, prev = lam, cur
        else:
            break
    return best


def gbm_feature_subset_size(n: int, p: int) -> int:
    return max(1, min(p // 3, math.isqrt(n)))


def fit_gbm(X, y, params: GbmParams) -> GbmModel:
    X = np.asarray(X, dtype=float)
    y = _check_two_classes(y).astype(float)
    n, p = X.shape
    if not (0.0 < params.subsample <= 1.0):
        raise DataError(f"subsample must lie in (0, 1], got {params.subsample}")
    n_pos = int((y == 1).sum())
    intercept = math.log(n_pos / (n - n_pos))
    F = np.full(n, intercept)
    m = gbm_feature_subset_size(n, p)
    per_split = max(1, m // 3)
    n_sub = max(1, math.floor(params.subsample * n))
    rng = np.random.default_rng(derive_seed(params.seed, "gbm"))
    codes, values, kdist = _column_codes(X)
    steps = []
    losses = [logistic_loss(y * F)]
    for _ in range(params.n_rounds):
        sub = rng.choice(n, size=n_sub, replace=False)
        feats = np.sort(rng.choice(p, size=m, replace=False))
        r = gbm_pseudo_residuals(y[sub], F[sub])
        X_sub = X[np.ix_(sub, feats)]
        tree = fit_tree(
            X_sub,
            r,
            TreeParams(
                task="regression",
                min_leaf_rows=max(2, n_sub // 64),
                features_per_split=per_split,
            ),
            rng=rng,
            binned=(codes[np.ix_(sub, feats)], [values[f] for f in feats], kdist[feats]),
        )
        lam = line_search_step(tree, X_sub, y[sub], F[sub], params.lr_start, params.lr_cap)
        F_new = F + lam * tree.predict(X, columns=feats)
        new_loss = logistic_loss(y * F_new)
        if new_loss <= losses[-1]:
            F = F_new
            steps.append(GbmStep(lam, tree, feats))
            losses.append(new_loss)
        else:
            losses.append(losses[-1])
    return GbmModel(intercept, steps, p, losses)


def predict_gbm(model: GbmModel, X) -> np.ndarray:
    """Additive score F(x); the decision label is +1 iff F >= 0."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != model.n_features:
        raise DataError(f"model was fit on {model.n_features} features, got {X.shape[1]}")
    F = np.full(X.shape[0], model.intercept)
    for step in model.steps:
        F += step.lam * step.tree.predict(X, columns=step.features)
    return F


def gbm_labels(scores) -> np.ndarray:
    return np.where(np.asarray(scores) >= 0.0, 1, -1)
