"""Gradient-boosted regression trees for the normal/abnormal decision.

Logistic loss, least-squares tree structure on the negative gradient, Newton
leaf values ``sum(residual) / sum(p * (1 - p))``. Inputs are the six head
probabilities of a patch.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .synthgen import ABNORMAL_TYPES

_TIE_TOL = 1e-12


def labelset_is_abnormal(labels) -> bool:
    return bool(ABNORMAL_TYPES.intersection(labels))


@dataclass
class RegressionTree:
    """Pre-order node arrays; ``feature[i] == -1`` marks a leaf."""

    feature: list[int] = field(default_factory=list)
    threshold: list[float] = field(default_factory=list)
    left: list[int] = field(default_factory=list)
    right: list[int] = field(default_factory=list)
    value: list[float] = field(default_factory=list)

    def _add(self, feature=-1, threshold=0.0, value=0.0) -> int:
        self.feature.append(feature)
        self.threshold.append(threshold)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.feature) - 1

    def depth(self, node: int = 0) -> int:
        if self.feature[node] < 0:
            return 0
        return 1 + max(self.depth(self.left[node]), self.depth(self.right[node]))

    def leaf_index(self, x: np.ndarray) -> np.ndarray:
        """Index of the leaf node each row of ``x`` lands in."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.empty(len(x), dtype=np.int64)
        stack = [(0, np.arange(len(x)))]
        while stack:
            node, idx = stack.pop()
            f = self.feature[node]
            if f < 0:
                out[idx] = node
                continue
            go_left = x[idx, f] <= self.threshold[node]
            stack.append((self.left[node], idx[go_left]))
            stack.append((self.right[node], idx[~go_left]))
        return out

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Leaf value for every row of ``x`` (a single vector is also accepted)."""
        single = np.ndim(x) == 1
        out = np.asarray(self.value)[self.leaf_index(x)]
        return out[0] if single else out

    def to_json(self) -> list[list]:
        return [[f, t, l, r, v] for f, t, l, r, v in zip(self.feature, self.threshold, self.left, self.right, self.value)]

    @classmethod
    def from_json(cls, nodes) -> "RegressionTree":
        tree = cls()
        for f, t, l, r, v in nodes:
            tree.feature.append(int(f))
            tree.threshold.append(float(t))
            tree.left.append(int(l))
            tree.right.append(int(r))
            tree.value.append(float(v))
        return tree


def newton_value(residual: np.ndarray, hessian: np.ndarray) -> float:
    return float(residual.sum() / max(hessian.sum(), 1e-12))


def best_split(x: np.ndarray, r: np.ndarray):
    """Exhaustive search for the split with the largest squared-residual reduction.

    Candidate thresholds are midpoints between consecutive distinct sorted
    values. Returns ``(gain, dim, threshold)``, or ``None`` when no split
    improves on the parent. Near-ties go to the lowest dimension, then the
    lowest threshold.
    """
    n, d = x.shape
    total = r.sum()
    parent = total * total / n
    best = None
    for dim in range(d):
        order = np.argsort(x[:, dim], kind="stable")
        xs = x[order, dim]
        cs = np.cumsum(r[order])
        nl = np.arange(1, n)
        left = cs[:-1]
        right = total - left
        gain = left * left / nl + right * right / (n - nl) - parent
        valid = xs[1:] > xs[:-1]
        if not valid.any():
            continue
        cand = np.flatnonzero(valid)
        g = gain[cand]
        i = int(np.argmax(g))
        # argmax returns the first maximum, i.e. the lowest threshold
        if best is None or g[i] > best[0] + _TIE_TOL * max(1.0, abs(best[0])):
            k = cand[i]
            best = (float(g[i]), dim, float(0.5 * (xs[k] + xs[k + 1])))
    if best is None or best[0] <= _TIE_TOL * max(1.0, abs(parent)):
        return None
    return best


def tree_split_search(x, residual, hessian, max_depth: int) -> RegressionTree:
    """Grow one regression tree greedily; leaves carry Newton values."""
    x = np.asarray(x, dtype=np.float64)
    residual = np.asarray(residual, dtype=np.float64)
    hessian = np.asarray(hessian, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("need at least one sample")
    tree = RegressionTree()

    def grow(idx, depth):
        node = tree._add(value=newton_value(residual[idx], hessian[idx]))
        if depth >= max_depth or len(idx) < 2:
            return node
        split = best_split(x[idx], residual[idx])
        if split is None:
            return node
        _, dim, thr = split
        go_left = x[idx, dim] <= thr
        tree.feature[node] = dim
        tree.threshold[node] = thr
        tree.value[node] = 0.0
        tree.left[node] = grow(idx[go_left], depth + 1)
        tree.right[node] = grow(idx[~go_left], depth + 1)
        return node

    grow(np.arange(len(x)), 0)
    return tree


@dataclass(frozen=True)
class GBMConfig:
    n_trees: int = 100
    max_depth: int = 3
    shrinkage: float = 0.1


@dataclass
class GBMModel:
    f0: float
    shrinkage: float = 0.1
    trees: list[RegressionTree] = field(default_factory=list)

    def decision_function(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        f = np.full(x.shape[:-1], self.f0, dtype=np.float64)
        for tree in self.trees:
            f = f + self.shrinkage * tree.predict(x)
        return f

    def predict_proba(self, x) -> np.ndarray:
        return _sigmoid(self.decision_function(x))

    def to_json(self) -> dict:
        return {"version": 1, "f0": self.f0, "shrinkage": self.shrinkage, "trees": [t.to_json() for t in self.trees]}

    @classmethod
    def from_json(cls, doc: dict) -> "GBMModel":
        if doc.get("version") != 1:
            raise ValueError(f"unsupported gbm version {doc.get('version')!r}")
        return cls(float(doc["f0"]), float(doc["shrinkage"]), [RegressionTree.from_json(t) for t in doc["trees"]])


def _sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def logistic_loss(y, f) -> float:
    # log(1 + e^f) - y f, computed stably
    f = np.asarray(f, dtype=np.float64)
    return float(np.mean(np.logaddexp(0.0, f) - np.asarray(y, dtype=np.float64) * f))


def _damp_leaves(tree: RegressionTree, x, y, f, shrinkage: float, max_halvings: int = 60) -> None:
    """Halve any leaf step that would raise that leaf's logistic loss.

    A pure Newton step can overshoot when a leaf mixes classes whose current
    scores are far from the optimum; leaves are disjoint, so keeping every
    leaf's loss from rising keeps the total loss non-increasing.
    """
    leaves = tree.leaf_index(x)
    for leaf in np.unique(leaves):
        idx = leaves == leaf
        before = logistic_loss(y[idx], f[idx])
        v = tree.value[leaf]
        for _ in range(max_halvings):
            if logistic_loss(y[idx], f[idx] + shrinkage * v) <= before:
                break
            v *= 0.5
        else:
            v = 0.0
        tree.value[leaf] = v


def fit_gbm(x, y, config: GBMConfig = GBMConfig()):
    """Fit the boosted model; returns ``(model, losses)`` with the loss before and after each round."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) == 0 or len(x) != len(y):
        raise ValueError("need a non-empty dataset with one target per sample")
    if not 0 < config.shrinkage <= 1:
        raise ValueError("shrinkage must lie in (0, 1]")
    base = min(max(float(y.mean()), 1e-6), 1 - 1e-6)
    model = GBMModel(math.log(base / (1 - base)), config.shrinkage)
    f = np.full(len(y), model.f0)
    losses = [logistic_loss(y, f)]
    for _ in range(config.n_trees):
        p = _sigmoid(f)
        tree = tree_split_search(x, y - p, p * (1 - p), config.max_depth)
        _damp_leaves(tree, x, y, f, config.shrinkage)
        model.trees.append(tree)
        f = f + config.shrinkage * tree.predict(x)
        losses.append(logistic_loss(y, f))
    return model, losses


def predict_abnormal(model: GBMModel, x) -> tuple[float, bool]:
    p = float(model.predict_proba(np.asarray(x, dtype=np.float64)))
    return p, p > 0.5


def save_gbm(path, model: GBMModel) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, sort_keys=True, separators=(",", ":"))


def load_gbm(path) -> GBMModel:
    with open(path) as fh:
        return GBMModel.from_json(json.load(fh))
