"""Exact-greedy least-squares regression trees used as boosting base learners."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["RegressionTree", "fit_tree"]

_LEAF = -1


@dataclass
class RegressionTree:
    """Flat-array binary tree. Internal nodes route x[feature] <= threshold
    to the left child; leaves carry the mean of their training targets."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            raise ValueError("X must be a 2-d array")
        n = X.shape[0]
        out = np.empty(n)
        node = np.zeros(n, dtype=np.int64)
        active = np.arange(n)
        while active.size:
            nd = node[active]
            is_leaf = self.feature[nd] == _LEAF
            leaf_rows = active[is_leaf]
            out[leaf_rows] = self.value[node[leaf_rows]]
            active = active[~is_leaf]
            if not active.size:
                break
            nd = node[active]
            go_left = X[active, self.feature[nd]] <= self.threshold[nd]
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
        return out

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=float),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=float),
        )


def _best_split(X, t, rows, min_samples_leaf):
    """Best (gain, feature, threshold) over all axis-aligned candidate splits.

    Candidates are midpoints between consecutive distinct sorted values.
    Ties resolve to the lowest feature index, then the lowest threshold.
    """
    n = rows.size
    t_sum = t[rows].sum()
    best_gain = 0.0
    best = None
    for j in range(X.shape[1]):
        xj = X[rows, j]
        order = np.argsort(xj, kind="stable")
        xs = xj[order]
        ts = t[rows][order]
        csum = np.cumsum(ts)
        # split after position i (1-based left count i+1)
        n_left = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (n_left >= min_samples_leaf) \
            & (n - n_left >= min_samples_leaf)
        if not valid.any():
            continue
        sl = csum[:-1]
        gains = sl**2 / n_left + (t_sum - sl) ** 2 / (n - n_left) - t_sum**2 / n
        gains = np.where(valid, gains, -np.inf)
        k = int(np.argmax(gains))
        if gains[k] > best_gain + 1e-12 * max(1.0, abs(best_gain)):
            best_gain = float(gains[k])
            best = (j, 0.5 * (xs[k] + xs[k + 1]))
    if best is None:
        return None
    return best_gain, best[0], best[1]


def fit_tree(X, targets, max_depth: int, min_samples_leaf: int = 1) -> RegressionTree:
    """Greedy top-down least-squares fit of ``targets`` on ``X``."""
    X = np.asarray(X, dtype=float)
    t = np.asarray(targets, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("X must be a non-empty 2-d array")
    if X.shape[0] != t.shape[0]:
        raise ValueError("X and targets must have the same number of rows")
    if np.isnan(X).any() or np.isnan(t).any():
        raise ValueError("missing values are not supported")

    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        feature.append(_LEAF)
        threshold.append(0.0)
        left.append(_LEAF)
        right.append(_LEAF)
        value.append(0.0)
        return len(feature) - 1

    stack = [(new_node(), np.arange(X.shape[0]), 0)]
    while stack:
        node, rows, depth = stack.pop()
        value[node] = float(t[rows].mean())
        if depth >= max_depth or rows.size < 2 * min_samples_leaf:
            continue
        if np.ptp(t[rows]) == 0.0:
            continue
        split = _best_split(X, t, rows, min_samples_leaf)
        if split is None:
            continue
        _, j, thr = split
        go_left = X[rows, j] <= thr
        feature[node] = j
        threshold[node] = float(thr)
        ln, rn = new_node(), new_node()
        left[node], right[node] = ln, rn
        stack.append((rn, rows[~go_left], depth + 1))
        stack.append((ln, rows[go_left], depth + 1))

    return RegressionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=float),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=float),
    )
