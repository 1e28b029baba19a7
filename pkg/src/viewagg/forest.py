"""Random forest (bootstrap + Gini + random feature subsets) for voxel classification."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import DataError
from .volume import Volume

FORMAT_VERSION = 1


@dataclass(frozen=True)
class ForestConfig:
    n_trees: int = 50
    max_depth: int = 20
    min_leaf: int = 5
    seed: int = 0
    max_features: int | None = None  # default round(sqrt(d))
    negative_ratio: float = 3.0


@njit(cache=True)
def _apply(X, feature, threshold, left, right):
    out = np.empty(X.shape[0], dtype=np.int64)
    for i in range(X.shape[0]):
        node = 0
        while feature[node] >= 0:
            if X[i, feature[node]] <= threshold[node]:
                node = left[node]
            else:
                node = right[node]
        out[i] = node
    return out


@dataclass
class DecisionTree:
    """Flat node arrays; ``feature == -1`` marks a leaf holding ``value``."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    max_depth: int

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by each row of ``X``."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _apply(X, self.feature, self.threshold, self.left, self.right)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "max_depth": self.max_depth,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DecisionTree":
        t = cls(
            np.asarray(d["feature"], dtype=np.int64),
            np.asarray(d["threshold"], dtype=np.float64),
            np.asarray(d["left"], dtype=np.int64),
            np.asarray(d["right"], dtype=np.int64),
            np.asarray(d["value"], dtype=np.float64),
            int(d["max_depth"]),
        )
        n = len(t.feature)
        inner = t.feature >= 0
        if np.any((t.left[inner] < 0) | (t.left[inner] >= n) | (t.right[inner] < 0) | (t.right[inner] >= n)):
            raise DataError("tree child index out of range")
        if np.any((t.value < 0) | (t.value > 1)):
            raise DataError("leaf fraction outside [0, 1]")
        return t


@dataclass
class ForestModel:
    trees: list
    feature_count: int
    config: ForestConfig = field(default_factory=ForestConfig)
    operating_threshold: float | None = None

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    @property
    def seed(self) -> int:
        return self.config.seed

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.feature_count:
            raise DataError(f"expected {self.feature_count} features, got shape {X.shape}")
        X = np.ascontiguousarray(X)
        acc = np.zeros(len(X))
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)

    def to_json(self) -> str:
        cfg = self.config
        doc = {
            "format_version": FORMAT_VERSION,
            "feature_count": self.feature_count,
            "n_trees": self.n_trees,
            "seed": cfg.seed,
            "config": {
                "n_trees": cfg.n_trees,
                "max_depth": cfg.max_depth,
                "min_leaf": cfg.min_leaf,
                "max_features": cfg.max_features,
                "negative_ratio": cfg.negative_ratio,
            },
            "operating_threshold": self.operating_threshold,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "ForestModel":
        doc = json.loads(text)
        if doc.get("format_version") != FORMAT_VERSION:
            raise DataError(f"unsupported forest format version {doc.get('format_version')!r}")
        cfg = ForestConfig(seed=doc["seed"], **doc["config"])
        return cls([DecisionTree.from_dict(t) for t in doc["trees"]], doc["feature_count"], cfg, doc["operating_threshold"])


@njit(cache=True)
def _scan_columns(sub, order, y, min_leaf):
    """Best split over the columns of ``sub`` given their ascending ``order``.

    The score is ``n * weighted Gini / 2`` at unique midpoints.  Returns
    ``(score, threshold, column)``; score is inf when nothing is admissible.
    Earlier columns win exact ties.
    """
    n, k = sub.shape
    total = 0.0
    for i in range(n):
        total += y[i]
    best, thr, col = np.inf, 0.0, -1
    for j in range(k):
        pos_left = 0.0
        for i in range(n - 1):
            pos_left += y[order[i, j]]
            n_left = i + 1.0
            n_right = n - n_left
            a, b = sub[order[i, j], j], sub[order[i + 1, j], j]
            if b > a and n_left >= min_leaf and n_right >= min_leaf:
                pos_right = total - pos_left
                score = pos_left * (n_left - pos_left) / n_left + pos_right * (n_right - pos_right) / n_right
                if score < best:
                    best, thr, col = score, 0.5 * (a + b), j
    return best, thr, col


def _best_split(x: np.ndarray, y: np.ndarray, min_leaf: int):
    """Lowest weighted Gini split of one feature column: ``(score, threshold)`` or None."""
    sub = np.asarray(x, dtype=np.float64)[:, None]
    # tie order cannot change the counts at unique midpoints
    s, t, _ = _scan_columns(sub, np.argsort(sub, axis=0), np.asarray(y, dtype=np.float64), int(min_leaf))
    return None if s == np.inf else (float(s), float(t))


def build_tree(X: np.ndarray, y: np.ndarray, cfg: ForestConfig, rng: np.random.Generator) -> DecisionTree:
    n_feat = X.shape[1]
    k = cfg.max_features or max(1, int(round(math.sqrt(n_feat))))
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for lst, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            lst.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, np.arange(len(y)), 0)]
    while stack:
        node, idx, depth = stack.pop()
        yy = y[idx]
        pos = float(yy.sum())
        value[node] = pos / len(idx)
        if depth >= cfg.max_depth or len(idx) < 2 * cfg.min_leaf or pos == 0 or pos == len(idx):
            continue
        cols = rng.choice(n_feat, size=min(k, n_feat), replace=False)
        sub = X[np.ix_(idx, cols)]
        score, thr, j = _scan_columns(sub, np.argsort(sub, axis=0), yy, cfg.min_leaf)
        if j < 0:
            continue
        f = int(cols[j])
        go_left = X[idx, f] <= thr
        feature[node], threshold[node] = f, thr
        left[node], right[node] = new_node(), new_node()
        # push right first so the left subtree is numbered first
        stack.append((right[node], idx[~go_left], depth + 1))
        stack.append((left[node], idx[go_left], depth + 1))
    return DecisionTree(
        np.asarray(feature, dtype=np.int64),
        np.asarray(threshold, dtype=np.float64),
        np.asarray(left, dtype=np.int64),
        np.asarray(right, dtype=np.int64),
        np.asarray(value, dtype=np.float64),
        cfg.max_depth,
    )


def _check_samples(X, labels):
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    if X.ndim != 2 or len(X) == 0:
        raise DataError("forest training needs a non-empty 2D sample matrix")
    if len(labels) != len(X):
        raise DataError("sample/label count mismatch")
    if not np.all(np.isin(labels, (-1, 1))):
        raise DataError("labels must be +1 / -1")
    if len(np.unique(labels)) < 2:
        raise DataError("forest training needs both classes")
    if not np.all(np.isfinite(X)):
        raise DataError("non-finite features")
    return X, (labels == 1).astype(np.float64)


def train_forest(X, labels, cfg: ForestConfig = ForestConfig()) -> ForestModel:
    """Bagged Gini trees; each tree gets its own spawned seed so order does not matter."""
    X, y = _check_samples(X, labels)
    if cfg.n_trees < 1:
        raise ValueError("n_trees must be >= 1")
    trees = []
    for child in np.random.SeedSequence(cfg.seed).spawn(cfg.n_trees):
        rng = np.random.default_rng(child)
        boot = rng.integers(0, len(y), len(y))
        trees.append(build_tree(X[boot], y[boot], cfg, rng))
    return ForestModel(trees, X.shape[1], cfg)


def balance_samples(X, labels, ratio: float, seed: int):
    """Keep every positive and a seeded draw of at most ``ratio`` negatives per positive."""
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels != 1)
    n_neg = min(len(neg), int(round(ratio * len(pos))))
    rng = np.random.default_rng(seed)
    keep = np.sort(np.concatenate([pos, rng.choice(neg, size=n_neg, replace=False)]))
    return np.asarray(X)[keep], labels[keep]


def predict_probmap(m: ForestModel, grid_field, spacing=(3.0, 3.0, 3.0)):
    """Grid-resolution probability volume from a :class:`GridFeatureField`."""
    if grid_field.features_per_voxel != m.feature_count:
        raise DataError(f"field has {grid_field.features_per_voxel} features, model expects {m.feature_count}")
    p = m.predict_proba(grid_field.vectors()).reshape(grid_field.grid_dims)
    return Volume(p, spacing, "probmap-f32")
