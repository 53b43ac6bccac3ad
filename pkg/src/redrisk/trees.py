"""Greedy binary decision trees: Gini for classification, variance for
regression.

Thresholds sit at midpoints of consecutive distinct sorted values; the split
search breaks gain ties deterministically by lowest feature index, then lowest
threshold.  Routing sends x < threshold left and x >= threshold right.  There
is no pruning; growth stops at pure nodes, the leaf-size floor, or when no
split strictly decreases impurity.

Columns are sorted once per tree (or once per ensemble) into dense rank
codes; a node's split search then reads prefix sums of per-rank histograms
instead of re-sorting its rows.  Columns with many distinct values fall back
to a per-node sort, where the near-constant histogram grid would cost more
than the sort it replaces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError

_GAIN_EPS = 1e-12
_BIN_MAX_DISTINCT = 64


@dataclass
class TreeParams:
    task: str = "classification"
    min_leaf_fraction: float = 1.0 / 64.0
    min_leaf_rows: int | None = None  # overrides the fraction when set
    features_per_split: int | None = None  # None: consider every feature
    seed: int = 0


@dataclass
class Split:
    feature: int
    threshold: float
    gain: float


class Tree:
    """Array-of-nodes tree; leaves carry the class probability of +1
    (classification) or the target mean (regression)."""

    def __init__(self, task, n_features, feature, threshold, left, right, value, n_node):
        self.task = task
        self.n_features = n_features
        self.feature = np.asarray(feature, dtype=int)
        self.threshold = np.asarray(threshold, dtype=float)
        self.left = np.asarray(left, dtype=int)
        self.right = np.asarray(right, dtype=int)
        self.value = np.asarray(value, dtype=float)
        self.n_node = np.asarray(n_node, dtype=int)

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature < 0))

    def predict(self, X, columns=None) -> np.ndarray:
        """columns maps tree feature indices into X's columns, so a tree fit
        on a column subset can read the full matrix without a copy."""
        X = np.asarray(X, dtype=float)
        squeeze = X.ndim == 1
        X = np.atleast_2d(X)
        if columns is not None:
            columns = np.asarray(columns, dtype=int)
        width = X.shape[1] if columns is None else columns.size
        if width != self.n_features:
            raise DataError(
                f"tree was fit on {self.n_features} features, got {width}"
            )
        node = np.zeros(X.shape[0], dtype=int)
        while True:
            feat = self.feature[node]
            moving = np.nonzero(feat >= 0)[0]
            if moving.size == 0:
                break
            cur = node[moving]
            cols = feat[moving] if columns is None else columns[feat[moving]]
            go_right = X[moving, cols] >= self.threshold[cur]
            node[moving] = np.where(go_right, self.right[cur], self.left[cur])
        out = self.value[node]
        return float(out[0]) if squeeze else out

    def to_state(self) -> dict:
        return {
            "task": self.task,
            "n_features": int(self.n_features),
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "n_node": self.n_node.tolist(),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Tree":
        return cls(
            state["task"],
            state["n_features"],
            state["feature"],
            state["threshold"],
            state["left"],
            state["right"],
            state["value"],
            state["n_node"],
        )


def _node_value(y, task):
    if task == "classification":
        return float(np.mean(y == 1))
    return float(np.mean(y))


def _column_codes(X):
    """Dense per-column ranks into each column's ascending distinct values.

    Returns (codes, values, n_distinct): codes[i, j] is the rank of X[i, j]
    within values[j].  Any row subset of codes can then drive the histogram
    scan in best_split with no further sorting."""
    n, p = X.shape
    order = np.argsort(X, axis=0, kind="stable")
    vs = np.take_along_axis(X, order, axis=0)
    first = np.ones((n, p), dtype=bool)
    first[1:] = vs[1:] > vs[:-1]
    ranks = np.cumsum(first, axis=0) - 1
    codes = np.empty((n, p), dtype=np.int32)
    np.put_along_axis(codes, order, ranks, axis=0)
    values = [vs[first[:, j], j] for j in range(p)]
    return codes, values, first.sum(axis=0)


def _scan_by_sort(X, rows, candidates, tgt, coef, total, min_leaf):
    """Best gain per candidate column via a per-node sort.

    Returns (col_best, k_per_col, vs); the boundary index k means the
    threshold sits between sorted rows k and k+1 of vs.  The decision only
    reads prefix statistics at distinct-value boundaries; those are invariant
    to ordering within tie blocks, so the sort need not be stable."""
    n = rows.size
    Xc = X[np.ix_(rows, candidates)]
    # timsort: feature columns are mostly zeros, so runs make it near-linear
    order = np.argsort(Xc, axis=0, kind="stable")
    vs = np.take_along_axis(Xc, order, axis=0)
    n_left = np.arange(1, n, dtype=float)[:, None]
    n_right = n - n_left
    valid = (n_left >= min_leaf) & (n_right >= min_leaf) & (vs[1:] > vs[:-1])
    if not valid.any():
        return np.full(candidates.size, -np.inf), None, None
    c = np.cumsum(tgt[order], axis=0)[:-1]
    gain = coef * (c * c / n_left + (total - c) ** 2 / n_right - total * total / n) / n
    gain[~valid] = -np.inf
    # first argmax within a column = lowest threshold
    k_per_col = np.argmax(gain, axis=0)
    col_best = gain[k_per_col, np.arange(gain.shape[1])]
    return col_best, k_per_col, vs


def _scan_by_bins(codes, kdist, rows, candidates, tgt, coef, total, min_leaf):
    """Best gain per candidate column via per-rank histograms.

    Prefix sums over the rank histogram reproduce the sorted-order prefix
    statistics exactly (target sums are reassociated, which matters only in
    the last float ulp for real-valued regression targets), so this scan and
    the sort scan agree on the chosen split."""
    n = rows.size
    m = candidates.size
    C = codes[np.ix_(rows, candidates)]
    k_s = int(kdist[candidates].max())
    off = C + (np.arange(m, dtype=np.int32) * np.int32(k_s))[None, :]
    flat = off.ravel()
    cnt = np.bincount(flat, minlength=m * k_s).reshape(m, k_s)
    wsum = np.bincount(
        flat,
        weights=np.broadcast_to(tgt[:, None], C.shape).ravel(),
        minlength=m * k_s,
    ).reshape(m, k_s)
    pn = np.cumsum(cnt, axis=1)
    present = cnt > 0
    # a boundary needs a present value strictly before the node's last row
    valid = present & (pn >= min_leaf) & (pn <= n - min_leaf) & (pn < n)
    if not valid.any():
        return np.full(m, -np.inf), None, None
    ps = np.cumsum(wsum, axis=1)
    nl = pn.astype(float)
    nr = n - nl
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = coef * (ps * ps / nl + (total - ps) ** 2 / nr - total * total / n) / n
    gain[~valid] = -np.inf
    # first argmax within a row = lowest rank = lowest threshold
    t_per_col = np.argmax(gain, axis=1)
    col_best = gain[np.arange(m), t_per_col]
    return col_best, t_per_col, present


def best_split(X, y, rows, candidates, min_leaf, task, binned=None) -> Split | None:
    """Exhaustive threshold search over the candidate features.

    binned, when given, is the (codes, values, n_distinct) triple from
    _column_codes for the whole matrix; low-cardinality columns are then
    scanned by histogram and only high-cardinality ones by sorting.  Returns
    None when no threshold strictly decreases impurity while leaving at least
    min_leaf rows on each side.
    """
    n = rows.size
    if n < 2 * min_leaf:
        return None
    yr = y[rows]
    candidates = np.asarray(candidates)
    # Gini gain (targets 1{y=+1}, coefficient 2) and variance gain (raw
    # targets, coefficient 1) share one sum-of-squares identity
    if task == "classification":
        tgt = (yr == 1).astype(float)
        coef = 2.0
    else:
        tgt = yr.astype(float)
        coef = 1.0
    total = tgt.sum()

    col_best = np.full(candidates.size, -np.inf)
    t_per_col = present = k_per_col = vs = None
    if binned is None:
        lo = np.array([], dtype=int)
        hi = np.arange(candidates.size)
    else:
        codes, values, kdist = binned
        small = kdist[candidates] <= _BIN_MAX_DISTINCT
        lo = np.flatnonzero(small)
        hi = np.flatnonzero(~small)
    if lo.size:
        col_best[lo], t_per_col, present = _scan_by_bins(
            codes, kdist, rows, candidates[lo], tgt, coef, total, min_leaf
        )
    if hi.size:
        col_best[hi], k_per_col, vs = _scan_by_sort(
            X, rows, candidates[hi], tgt, coef, total, min_leaf
        )
    # first max across the ascending candidates = lowest feature index
    j = int(np.argmax(col_best))
    if not col_best[j] > _GAIN_EPS:
        return None
    if lo.size and small[j]:
        c = int(np.searchsorted(lo, j))
        t = int(t_per_col[c])
        t2 = t + 1 + int(np.argmax(present[c, t + 1:]))
        u = values[int(candidates[j])]
        v_lo, v_hi = float(u[t]), float(u[t2])
    else:
        c = int(np.searchsorted(hi, j))
        k = int(k_per_col[c])
        v_lo, v_hi = float(vs[k, c]), float(vs[k + 1, c])
    thr = (v_lo + v_hi) / 2.0
    if thr <= v_lo:
        # midpoint of adjacent floats can round down onto the lower value,
        # which would send the whole tie block right; any thr in (v_lo, v_hi]
        # realizes the same partition, so take the upper value
        thr = v_hi
    return Split(int(candidates[j]), thr, float(col_best[j]))


def fit_tree(X, y, params: TreeParams, rng=None, binned=None) -> Tree:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError(f"X {X.shape} and y {y.shape} do not align")
    n, p = X.shape
    if n < 1:
        raise DataError("cannot fit a tree on zero rows")
    if params.task == "classification" and not np.isin(y, (-1, 1)).all():
        raise DataError("classification labels must be -1/+1")
    if params.task not in ("classification", "regression"):
        raise DataError(f"unknown task {params.task!r}")
    if params.min_leaf_rows is not None:
        min_leaf = int(params.min_leaf_rows)
    else:
        min_leaf = max(1, math.floor(params.min_leaf_fraction * n))
    k = params.features_per_split
    subset = k is not None and k < p
    if rng is None:
        rng = np.random.default_rng(params.seed)
    if binned is None:
        binned = _column_codes(X)

    feature, threshold, left, right, value, n_node = [], [], [], [], [], []

    def new_node(rows):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(_node_value(y[rows], params.task))
        n_node.append(rows.size)
        return len(feature) - 1

    root_rows = np.arange(n)
    stack = [(new_node(root_rows), root_rows)]
    while stack:
        node_id, rows = stack.pop()
        yr = y[rows]
        if params.task == "classification":
            pure = (yr == yr[0]).all()
        else:
            pure = yr.min() == yr.max()
        if pure or rows.size < 2 * min_leaf:
            continue
        if subset:
            candidates = np.sort(rng.choice(p, size=k, replace=False))
        else:
            candidates = np.arange(p)
        split = best_split(X, y, rows, candidates, min_leaf, params.task, binned=binned)
        if split is None:
            continue
        go_right = X[rows, split.feature] >= split.threshold
        rows_l = rows[~go_right]
        rows_r = rows[go_right]
        feature[node_id] = split.feature
        threshold[node_id] = split.threshold
        lid = new_node(rows_l)
        rid = new_node(rows_r)
        left[node_id] = lid
        right[node_id] = rid
        stack.append((rid, rows_r))
        stack.append((lid, rows_l))

    return Tree(params.task, p, feature, threshold, left, right, value, n_node)
