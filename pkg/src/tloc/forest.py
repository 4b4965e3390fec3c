"""Multi-output regression forest over relative positions.

Each tree is grown on a bootstrap resample until its leaves are pure,
choosing at every node the split with the largest decrease of summed squared
error over both output coordinates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _kernels

DEFAULT_N_TREES = 200


@dataclass
class ForestConfig:
    n_trees: int = DEFAULT_N_TREES
    max_features: Optional[int] = None  # None -> floor(sqrt(n_features))
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")

    def features_for(self, n_features: int) -> int:
        if self.max_features is None:
            return max(1, int(math.isqrt(n_features)))
        return max(1, min(self.max_features, n_features))


@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray
    sample_index: Optional[np.ndarray] = field(default=None, repr=False)  # bootstrap rows

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.feature == _kernels.LEAF))

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == _kernels.LEAF

    def apply(self, X: np.ndarray) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _kernels.apply_tree(self.feature, self.threshold, self.left, self.right, X)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def parents(self) -> np.ndarray:
        parent = np.full(self.n_nodes, -1, dtype=np.int64)
        internal = np.flatnonzero(self.feature != _kernels.LEAF)
        parent[self.left[internal]] = internal
        parent[self.right[internal]] = internal
        return parent

    def same_structure(self, other: "Tree") -> bool:
        return (self.n_nodes == other.n_nodes
                and np.array_equal(self.feature, other.feature)
                and np.array_equal(self.left, other.left)
                and np.array_equal(self.right, other.right))

    def identical(self, other: "Tree") -> bool:
        return (self.same_structure(other)
                and np.array_equal(self.threshold, other.threshold)
                and np.array_equal(self.value, other.value)
                and np.array_equal(self.count, other.count))


@dataclass
class RegressionForest:
    trees: list[Tree]
    config: ForestConfig
    n_features: int
    # training data is kept so that structure transfer can route source samples
    X_train: Optional[np.ndarray] = field(default=None, repr=False)
    Y_train: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def n_trees(self) -> int:
        return len(self.trees)

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.atleast_2d(X), dtype=np.float64)
        acc = np.zeros((X.shape[0], 2))
        for t in self.trees:
            acc += t.predict(X)
        return acc / len(self.trees)

    def identical(self, other: "RegressionForest") -> bool:
        return (self.n_trees == other.n_trees
                and all(a.identical(b) for a, b in zip(self.trees, other.trees)))


def train_forest(X, Y, config: Optional[ForestConfig] = None) -> RegressionForest:
    """Fit a forest on feature rows ``X`` (n, n_f) and relative labels ``Y`` (n, 2).

    Tree ``i`` uses seed ``config.seed + i`` for both its bootstrap draw and
    its feature sampling, so a forest is a pure function of data and seed.
    """
    config = config or ForestConfig()
    X = np.ascontiguousarray(X, dtype=np.float64)
    Y = np.ascontiguousarray(Y, dtype=np.float64).reshape(-1, 2)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("empty training set")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y row counts differ")
    n, n_f = X.shape
    m = config.features_for(n_f)
    trees = []
    for i in range(config.n_trees):
        tree_seed = config.seed + i
        rng = np.random.default_rng(tree_seed)
        idx = rng.integers(0, n, n).astype(np.int64)
        arrays = _kernels.grow_tree(X, Y, idx, m, tree_seed % (2**32))
        trees.append(Tree(*arrays, sample_index=idx))
    return RegressionForest(trees=trees, config=config, n_features=n_f, X_train=X, Y_train=Y)


def predict(forest: RegressionForest, fv) -> np.ndarray:
    """Mean of per-tree leaf values; a single vector gives shape (2,)."""
    fv = np.asarray(fv, dtype=float)
    out = forest.predict(fv)
    return out[0] if fv.ndim == 1 else out


def sse(labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=float).reshape(-1, 2)
    if len(labels) == 0:
        return 0.0
    return float(np.sum((labels - labels.mean(axis=0)) ** 2))


def variance_reduction(X, Y, feature: int, threshold: float) -> float:
    """SSE(parent) - SSE(left) - SSE(right); ``-inf`` if a side is empty."""
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float).reshape(-1, 2)
    go_left = X[:, feature] <= threshold
    if go_left.all() or not go_left.any():
        return -math.inf
    return sse(Y) - sse(Y[go_left]) - sse(Y[~go_left])


# -- serialization -----------------------------------------------------------

def forest_to_dict(forest: RegressionForest, include_training: bool = True) -> dict:
    trees = []
    for t in forest.trees:
        parent = t.parents()
        nodes = []
        for i in range(t.n_nodes):
            node = {"id": i, "parent": int(parent[i]), "count": int(t.count[i]),
                    "value": [float(t.value[i, 0]), float(t.value[i, 1])]}
            if not t.is_leaf(i):
                node.update(feature=int(t.feature[i]), threshold=float(t.threshold[i]),
                            left=int(t.left[i]), right=int(t.right[i]))
            nodes.append(node)
        entry = {"nodes": nodes}
        if include_training and t.sample_index is not None:
            entry["sample_index"] = t.sample_index.tolist()
        trees.append(entry)
    out = {
        "format": "tloc-forest/1",
        "n_features": forest.n_features,
        "config": {"n_trees": forest.config.n_trees, "max_features": forest.config.max_features,
                   "seed": forest.config.seed},
        "trees": trees,
    }
    if include_training and forest.X_train is not None:
        out["training"] = {"X": forest.X_train.tolist(), "Y": forest.Y_train.tolist()}
    return out


def forest_from_dict(data: dict) -> RegressionForest:
    if data.get("format") != "tloc-forest/1":
        raise ValueError(f"unknown forest format {data.get('format')!r}")
    trees = []
    for entry in data["trees"]:
        nodes = entry["nodes"]
        n = len(nodes)
        feature = np.full(n, _kernels.LEAF, dtype=np.int64)
        threshold = np.zeros(n)
        left = np.full(n, _kernels.LEAF, dtype=np.int64)
        right = np.full(n, _kernels.LEAF, dtype=np.int64)
        value = np.zeros((n, 2))
        count = np.zeros(n, dtype=np.int64)
        for node in nodes:
            i = node["id"]
            value[i] = node["value"]
            count[i] = node["count"]
            if "feature" in node:
                feature[i] = node["feature"]
                threshold[i] = node["threshold"]
                left[i] = node["left"]
                right[i] = node["right"]
        idx = entry.get("sample_index")
        trees.append(Tree(feature, threshold, left, right, value, count,
                          sample_index=np.array(idx, dtype=np.int64) if idx is not None else None))
    cfg = ForestConfig(**data["config"])
    training = data.get("training")
    X = np.array(training["X"], dtype=float) if training else None
    Y = np.array(training["Y"], dtype=float).reshape(-1, 2) if training else None
    return RegressionForest(trees=trees, config=cfg, n_features=data["n_features"], X_train=X, Y_train=Y)


def save_forest(forest: RegressionForest, path, include_training: bool = True) -> None:
    Path(path).write_text(json.dumps(forest_to_dict(forest, include_training)))


def load_forest(path) -> RegressionForest:
    return forest_from_dict(json.loads(Path(path).read_text()))
