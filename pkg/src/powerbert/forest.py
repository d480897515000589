"""Random forest of CART trees with Gini splits, written for 3-class detection.

Trees are grown on bootstrap samples drawn over a canonical ordering of the
training rows, so shuffling the input rows does not change the fitted forest.
Fitted trees are packed into flat arrays and evaluated for all trees at once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

FOREST_FORMAT_VERSION = 1


def gini(counts) -> float:
    counts = np.asarray(counts, dtype=float)
    if np.any(counts < 0):
        raise ValueError("class counts must be non-negative")
    total = counts.sum()
    if total <= 0:
        raise ValueError("gini of an empty node")
    p = counts / total
    return float(1.0 - np.sum(p * p))


@dataclass
class ForestConfig:
    n_estimators: int = 1000
    max_depth: int | None = None
    min_samples_split: int = 2
    max_features: str | int | None = "sqrt"
    workers: int = 1

    def features_per_node(self, n_features: int) -> int:
        mf = self.max_features
        if mf is None:
            return n_features
        if mf == "sqrt":
            return max(1, int(np.sqrt(n_features)))
        if mf == "log2":
            return max(1, int(np.log2(n_features)))
        return max(1, min(int(mf), n_features))


class Tree:
    """Flat array tree.  Leaves have feature == -1 and carry class counts."""

    __slots__ = ("feature", "threshold", "left", "right", "counts")

    def __init__(self, feature, threshold, left, right, counts):
        self.feature = np.asarray(feature, dtype=np.int64)
        self.threshold = np.asarray(threshold, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.counts = np.asarray(counts, dtype=np.float64)

    @property
    def node_count(self) -> int:
        return len(self.feature)

    def depth(self) -> int:
        d = np.zeros(self.node_count, dtype=int)
        for i in range(self.node_count):
            if self.feature[i] >= 0:
                d[self.left[i]] = d[self.right[i]] = d[i] + 1
        return int(d.max())

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return node
            go_left = X[rows[inner], f[inner]] <= self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    def predict_proba(self, X) -> np.ndarray:
        c = self.counts[self.leaf_index(np.asarray(X, dtype=float))]
        return c / c.sum(axis=1, keepdims=True)

    # nested records for serialisation
    def to_record(self, i: int = 0) -> dict:
        if self.feature[i] < 0:
            return {"counts": self.counts[i].tolist()}
        return {
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "left": self.to_record(int(self.left[i])),
            "right": self.to_record(int(self.right[i])),
        }

    @classmethod
    def from_record(cls, rec: dict, n_classes: int) -> "Tree":
        feature, threshold, left, right, counts = [], [], [], [], []

        def visit(r):
            i = len(feature)
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            counts.append([0.0] * n_classes)
            if "counts" in r:
                counts[i] = list(r["counts"])
            else:
                feature[i] = int(r["feature"])
                threshold[i] = float(r["threshold"])
                left[i] = visit(r["left"])
                right[i] = visit(r["right"])
            return i

        visit(rec)
        return cls(feature, threshold, left, right, counts)


def _best_split(X: np.ndarray, Y: np.ndarray, features: np.ndarray):
    """Greedy Gini split over ``features`` (ascending).  Returns (feature,
    threshold, weighted impurity) or None.  Ties keep the lowest feature index,
    then the lowest threshold."""
    n = len(X)
    best = None
    total = Y.sum(axis=0)
    for f in features:
        order = np.argsort(X[:, f], kind="stable")
        v = X[order, f]
        valid = np.flatnonzero(v[1:] != v[:-1])
        if valid.size == 0:
            continue
        left = np.cumsum(Y[order], axis=0)[valid]
        right = total - left
        nl = left.sum(axis=1)
        nr = n - nl
        imp = (nl - (left * left).sum(axis=1) / nl) + (nr - (right * right).sum(axis=1) / nr)
        j = int(np.argmin(imp))
        if best is None or imp[j] < best[2]:
            best = (int(f), 0.5 * (v[valid[j]] + v[valid[j] + 1]), float(imp[j]))
    return best


def build_tree(X: np.ndarray, y: np.ndarray, n_classes: int, cfg: ForestConfig, rng: np.random.Generator) -> Tree:
    Y = np.eye(n_classes)[y]
    mf = cfg.features_per_node(X.shape[1])
    feature, threshold, left, right, counts = [], [], [], [], []

    def new_node(c):
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        counts.append(c)
        return len(feature) - 1

    stack = [(np.arange(len(X)), new_node(Y.sum(axis=0)), 0)]
    while stack:
        idx, node, depth = stack.pop()
        c = counts[node]
        if (np.count_nonzero(c) <= 1 or len(idx) < cfg.min_samples_split
                or (cfg.max_depth is not None and depth >= cfg.max_depth)):
            continue
        Xn = X[idx]
        live = np.flatnonzero(Xn.max(axis=0) > Xn.min(axis=0))
        if live.size == 0:
            continue
        cand = np.sort(rng.choice(live, size=min(mf, live.size), replace=False))
        split = _best_split(Xn, Y[idx], cand)
        if split is None:
            continue
        f, thr, _ = split
        go_left = Xn[:, f] <= thr
        li, ri = idx[go_left], idx[~go_left]
        ln = new_node(Y[li].sum(axis=0))
        rn = new_node(Y[ri].sum(axis=0))
        feature[node], threshold[node], left[node], right[node] = f, thr, ln, rn
        stack.append((ri, rn, depth + 1))
        stack.append((li, ln, depth + 1))
    return Tree(feature, threshold, left, right, counts)


def _fit_one(X, y, n_classes, cfg, seed_seq) -> Tree:
    rng = np.random.default_rng(seed_seq)
    boot = rng.integers(0, len(X), size=len(X))
    return build_tree(X[boot], y[boot], n_classes, cfg, rng)


def canonical_order(X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Row order that depends only on the multiset of (row, label) pairs."""
    return np.lexsort(np.column_stack([X, y]).T[::-1])


class RandomForest:
    def __init__(self, trees: list[Tree], n_features: int, n_classes: int = 3, config: ForestConfig | None = None, seed: int = 0):
        self.trees = trees
        self.n_features = n_features
        self.n_classes = n_classes
        self.config = config or ForestConfig(n_estimators=len(trees))
        self.seed = seed
        self._pack()

    def _pack(self):
        sizes = np.array([t.node_count for t in self.trees])
        offs = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self._roots = offs
        self._feature = np.concatenate([t.feature for t in self.trees])
        self._threshold = np.concatenate([t.threshold for t in self.trees])
        self._left = np.concatenate([np.where(t.left >= 0, t.left + o, -1) for t, o in zip(self.trees, offs)])
        self._right = np.concatenate([np.where(t.right >= 0, t.right + o, -1) for t, o in zip(self.trees, offs)])
        c = np.concatenate([t.counts for t in self.trees])
        tot = c.sum(axis=1, keepdims=True)
        self._proba = np.divide(c, tot, out=np.zeros_like(c), where=tot > 0)
        # leaves point to themselves so traversal can run a fixed number of steps
        leaf = self._feature < 0
        ids = np.arange(len(self._feature))
        self._left[leaf] = ids[leaf]
        self._right[leaf] = ids[leaf]
        self._feat_safe = np.where(leaf, 0, self._feature)
        self._max_depth = max(t.depth() for t in self.trees)

    @property
    def n_estimators(self) -> int:
        return len(self.trees)

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[None]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return X

    def predict_proba(self, X) -> np.ndarray:
        """Mean of per-tree leaf class distributions, shape (n, classes)."""
        X = self._check(X)
        node = np.broadcast_to(self._roots, (len(X), len(self._roots))).copy()
        rows = np.arange(len(X))[:, None]
        for _ in range(self._max_depth):
            go_left = X[rows, self._feat_safe[node]] <= self._threshold[node]
            node = np.where(go_left, self._left[node], self._right[node])
        return self._proba[node].mean(axis=1)

    def predict(self, X) -> np.ndarray:
        # argmax returns the lowest index on ties
        return np.argmax(self.predict_proba(X), axis=1)

    def predict_one(self, x) -> tuple[int, np.ndarray]:
        proba = self.predict_proba(np.asarray(x)[None])[0]
        return int(np.argmax(proba)), proba

    # ---------------------------------------------------------------- io
    def to_json(self) -> str:
        return json.dumps({
            "version": FOREST_FORMAT_VERSION,
            "n_features": self.n_features,
            "n_classes": self.n_classes,
            "seed": self.seed,
            "config": {k: getattr(self.config, k) for k in ("n_estimators", "max_depth", "min_samples_split", "max_features")},
            "trees": [t.to_record() for t in self.trees],
        })

    @classmethod
    def from_json(cls, text: str) -> "RandomForest":
        d = json.loads(text)
        if d.get("version") != FOREST_FORMAT_VERSION:
            raise ValueError(f"unsupported forest format version {d.get('version')}")
        trees = [Tree.from_record(r, d["n_classes"]) for r in d["trees"]]
        return cls(trees, d["n_features"], d["n_classes"], ForestConfig(**d["config"]), d["seed"])


def fit_forest(X, y, config: ForestConfig | None = None, seed: int = 0, n_classes: int = 3) -> RandomForest:
    """Bootstrap + sqrt(F) Gini trees.  Each tree gets its own child seed, so the
    result is identical for any worker count."""
    config = config or ForestConfig()
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=int)
    if X.ndim != 2 or len(X) != len(y):
        raise ValueError("X must be 2-D with one label per row")
    if config.n_estimators < 1:
        raise ValueError("n_estimators must be >= 1")
    present = np.unique(y)
    if len(present) < 2:
        raise ValueError("training data holds a single class")
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"labels must be in 0..{n_classes - 1}")
    order = canonical_order(X, y)
    X, y = X[order], y[order]
    seeds = np.random.SeedSequence(seed).spawn(config.n_estimators)
    if config.workers > 1:
        from joblib import Parallel, delayed
        trees = Parallel(n_jobs=config.workers)(delayed(_fit_one)(X, y, n_classes, config, s) for s in seeds)
    else:
        trees = [_fit_one(X, y, n_classes, config, s) for s in seeds]
    return RandomForest(list(trees), X.shape[1], n_classes, config, seed)
