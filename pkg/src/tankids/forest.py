"""Random Forest classifier built from Gini-split decision trees.

Trees are grown by a compiled kernel over flat node arrays.  Each tree owns
a random stream derived from ``(seed, tree_index)``, so a forest of ``n``
trees is a prefix of any larger forest fitted with the same seed; grid
search relies on this to score several ``n_trees`` values from one fit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numba
import numpy as np

FORMAT_NAME = "tankids-forest"
FORMAT_VERSION = 1
LEAF = -1


class Hyperparams(NamedTuple):
    """``max_depth=None`` grows until leaves are pure or unsplittable.

    ``features_per_split=None`` means ``floor(sqrt(d))``.
    """

    n_trees: int = 100
    max_depth: Optional[int] = None
    min_samples_split: int = 2
    features_per_split: Optional[int] = None

    def validate(self, n_features: int) -> None:
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise ValueError("max_depth must be >= 0 or None")
        if self.min_samples_split < 2:
            raise ValueError("min_samples_split must be >= 2")
        if not 1 <= self.resolved_m(n_features) <= n_features:
            raise ValueError(f"features_per_split must lie in 1..{n_features}")

    def resolved_m(self, n_features: int) -> int:
        if self.features_per_split is None:
            return max(1, math.isqrt(n_features))
        return self.features_per_split


DEFAULT_GRID = tuple(
    Hyperparams(n, depth, mss)
    for n in (10, 50, 100)
    for depth in (4, 8, None)
    for mss in (2, 10)
)


def gini(class_counts: Sequence[int]) -> float:
    """Gini impurity ``1 - sum(f_i^2)`` of a node with the given class counts."""
    counts = [int(c) for c in class_counts]
    if any(c < 0 for c in counts):
        raise ValueError("class counts must be non-negative")
    total = sum(counts)
    if total == 0:
        raise ValueError("Gini impurity is undefined for an empty node")
    return 1.0 - sum((c / total) ** 2 for c in counts)


# --------------------------------------------------------------------------
# compiled kernels


@numba.njit(cache=True)
def _split_node(X, y, idx, start, end, features, n_classes):
    """Best (feature, threshold) for samples ``idx[start:end]``.

    Maximizes sum over children of sum_c count_c^2 / n_child, which is the
    same as minimizing the size-weighted child Gini impurity.  Returns
    ``(-1, nan, -inf)`` when no threshold separates the samples.
    """
    n = end - start
    best_feature = -1
    best_threshold = np.nan
    best_score = -np.inf
    xs = np.empty(n)
    ys = np.empty(n, dtype=np.int64)
    total = np.zeros(n_classes, dtype=np.int64)
    for i in range(n):
        total[y[idx[start + i]]] += 1
    left = np.zeros(n_classes, dtype=np.int64)
    for f in features:
        for i in range(n):
            xs[i] = X[idx[start + i], f]
        order = np.argsort(xs, kind="mergesort")
        for i in range(n):
            ys[i] = y[idx[start + order[i]]]
        left[:] = 0
        for i in range(n - 1):
            left[ys[i]] += 1
            lo = xs[order[i]]
            hi = xs[order[i + 1]]
            if not lo < hi:
                continue
            n_left = i + 1
            n_right = n - n_left
            sq_left = 0.0
            sq_right = 0.0
            for c in range(n_classes):
                sq_left += left[c] * left[c]
                r = total[c] - left[c]
                sq_right += r * r
            score = sq_left / n_left + sq_right / n_right
            if score > best_score:
                best_score = score
                best_feature = f
                threshold = 0.5 * (lo + hi)
                # midpoint of adjacent floats can round up onto hi
                best_threshold = threshold if threshold < hi else lo
    return best_feature, best_threshold, best_score


@numba.njit(cache=True)
def _grow(X, y, sample_idx, n_classes, max_depth, min_samples_split, m, draws):
    """Grow one tree depth-first.

    ``draws[k]`` holds uniform numbers that pick the feature subset of the
    k-th node created.  ``max_depth < 0`` means unlimited.
    """
    n = sample_idx.shape[0]
    d = X.shape[1]
    cap = 2 * n + 1
    feature = np.full(cap, -1, dtype=np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    counts = np.zeros((cap, n_classes), dtype=np.int64)
    depth_of = np.zeros(cap, dtype=np.int64)
    start_of = np.zeros(cap, dtype=np.int64)
    end_of = np.zeros(cap, dtype=np.int64)

    idx = sample_idx.copy()
    n_nodes = 1
    start_of[0] = 0
    end_of[0] = n
    stack = np.empty(cap, dtype=np.int64)
    top = 0
    stack[top] = 0
    top += 1
    while top > 0:
        top -= 1
        node = stack[top]
        s = start_of[node]
        e = end_of[node]
        size = e - s
        for i in range(s, e):
            counts[node, y[idx[i]]] += 1
        pure = False
        for c in range(n_classes):
            if counts[node, c] == size:
                pure = True
        if pure or size < min_samples_split or (max_depth >= 0 and depth_of[node] >= max_depth):
            continue
        # draw the subset among features that still vary inside the node
        ranked = np.argsort(draws[node])
        features = np.empty(m, dtype=np.int64)
        k = 0
        for j in range(d):
            fj = ranked[j]
            first = X[idx[s], fj]
            for i in range(s + 1, e):
                if X[idx[i], fj] != first:
                    features[k] = fj
                    k += 1
                    break
            if k == m:
                break
        if k == 0:
            continue
        f, thr, score = _split_node(X, y, idx, s, e, features[:k], n_classes)
        if f < 0:
            continue
        parent_score = 0.0
        for c in range(n_classes):
            parent_score += counts[node, c] * counts[node, c]
        parent_score /= size
        if not score > parent_score * (1.0 + 1e-12):
            continue
        # partition idx[s:e] stably: <= threshold goes left
        buf = np.empty(size, dtype=np.int64)
        k = 0
        for i in range(s, e):
            if X[idx[i], f] <= thr:
                buf[k] = idx[i]
                k += 1
        mid = s + k
        for i in range(s, e):
            if X[idx[i], f] > thr:
                buf[k] = idx[i]
                k += 1
        idx[s:e] = buf
        feature[node] = f
        threshold[node] = thr
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        left[node] = lc
        right[node] = rc
        for child, cs, ce in ((lc, s, mid), (rc, mid, e)):
            start_of[child] = cs
            end_of[child] = ce
            depth_of[child] = depth_of[node] + 1
        # push right first so the left subtree is expanded first
        stack[top] = rc
        stack[top + 1] = lc
        top += 2
    return (
        feature[:n_nodes].copy(),
        threshold[:n_nodes].copy(),
        left[:n_nodes].copy(),
        right[:n_nodes].copy(),
        counts[:n_nodes].copy(),
    )


@numba.njit(cache=True)
def _route(feature, threshold, left, right, X):
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


# --------------------------------------------------------------------------


class Split(NamedTuple):
    feature: int
    threshold: float
    impurity: float  # size-weighted mean Gini of the two children


def best_split(X, y, feature_subset: Iterable[int]) -> Optional[Split]:
    """Lowest weighted child impurity over midpoints of consecutive distinct values.

    Returns None when no threshold yields two non-empty children or none
    strictly lowers the impurity of the parent.  Ties keep the first
    candidate in (feature_subset order, ascending threshold).
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    if n == 0:
        raise ValueError("best_split needs at least one sample")
    features = np.asarray(list(feature_subset), dtype=np.int64)
    if features.size == 0:
        raise ValueError("feature subset must not be empty")
    n_classes = int(y.max()) + 1
    f, thr, score = _split_node(X, y, np.arange(n), 0, n, features, n_classes)
    if f < 0:
        return None
    parent_score = float(np.sum(np.bincount(y, minlength=n_classes) ** 2)) / n
    if not score > parent_score * (1.0 + 1e-12):
        return None
    return Split(int(f), float(thr), 1.0 - score / n)


@dataclass(frozen=True, eq=False)
class Tree:
    """Flat binary tree; node 0 is the root, ``feature == -1`` marks a leaf.

    ``counts[i]`` are the class counts that reached node ``i`` during fit.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    counts: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def is_leaf(self, node: int) -> bool:
        return self.feature[node] == LEAF

    def leaf_label(self, node: int) -> int:
        row = self.counts[node]
        # highest label wins a tie, i.e. an undecided leaf votes anomalous
        return int(len(row) - 1 - np.argmax(row[::-1]))

    @property
    def depth(self) -> int:
        depth = np.zeros(self.n_nodes, dtype=np.int64)
        for i in range(self.n_nodes):
            if not self.is_leaf(i):
                depth[self.left[i]] = depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        leaves = _route(self.feature, self.threshold, self.left, self.right, X)
        k = self.counts.shape[1]
        labels = k - 1 - np.argmax(self.counts[:, ::-1], axis=1)
        return labels[leaves].astype(np.int64)

    def node_records(self) -> list[list]:
        return [
            [int(f), float(t), int(lo), int(hi), [int(c) for c in cnt]]
            for f, t, lo, hi, cnt in zip(self.feature, self.threshold, self.left, self.right, self.counts)
        ]

    @classmethod
    def from_node_records(cls, records: list[list]) -> "Tree":
        if not records:
            raise ValueError("a tree needs at least a root node")
        feature = np.array([r[0] for r in records], dtype=np.int64)
        return cls(
            feature=feature,
            threshold=np.array([r[1] for r in records], dtype=np.float64),
            left=np.array([r[2] for r in records], dtype=np.int64),
            right=np.array([r[3] for r in records], dtype=np.int64),
            counts=np.array([r[4] for r in records], dtype=np.int64),
        )

    def check(self) -> None:
        """Raise if the structural invariants do not hold."""
        for i in range(self.n_nodes):
            if self.counts[i].sum() <= 0:
                raise ValueError(f"node {i} has no samples")
            internal = not self.is_leaf(i)
            has_children = self.left[i] >= 0 and self.right[i] >= 0
            if internal != has_children:
                raise ValueError(f"node {i} must have both children or none")


def grow_tree(X, y, params: Hyperparams, rng: np.random.Generator, n_classes: int = 2) -> Tree:
    """Grow one tree on the given (already bootstrapped) samples."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(y) == 0:
        raise ValueError("cannot grow a tree on an empty sample")
    params.validate(X.shape[1])
    return _grow_indices(X, y, np.arange(len(y)), params, rng, n_classes)


def _grow_indices(X, y, sample_idx, params, rng, n_classes) -> Tree:
    n, d = len(sample_idx), X.shape[1]
    draws = rng.random((2 * n + 1, d))
    depth = -1 if params.max_depth is None else params.max_depth
    arrays = _grow(X, y, sample_idx, n_classes, depth, params.min_samples_split, params.resolved_m(d), draws)
    return Tree(*arrays)


def tree_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


@dataclass(frozen=True, eq=False)
class Forest:
    trees: tuple[Tree, ...]
    hyperparams: Hyperparams
    seed: int
    n_features: int
    n_classes: int = 2

    def votes(self, X) -> np.ndarray:
        """Per-class vote counts, shape (n_samples, n_classes)."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        out = np.zeros((X.shape[0], self.n_classes), dtype=np.int64)
        rows = np.arange(X.shape[0])
        for tree in self.trees:
            np.add.at(out, (rows, tree.predict(X)), 1)
        return out

    def predict(self, X) -> np.ndarray:
        return _majority(self.votes(X))


def _majority(votes: np.ndarray) -> np.ndarray:
    # exact tie goes to the highest label (anomalous for binary)
    k = votes.shape[1]
    return (k - 1 - np.argmax(votes[:, ::-1], axis=1)).astype(np.int64)


def _check_training(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or len(X) != len(y) or len(y) == 0:
        raise ValueError("training data must be a non-empty (n, d) matrix with n labels")
    if len(np.unique(y)) < 2:
        raise ValueError("training data must contain both classes")
    return X, y


def _fit_trees(X, y, params: Hyperparams, seed: int, n_classes: int) -> list[Tree]:
    n = len(y)
    trees = []
    for t in range(params.n_trees):
        rng = tree_rng(seed, t)
        bootstrap = rng.integers(0, n, size=n)
        trees.append(_grow_indices(X, y, bootstrap, params, rng, n_classes))
    return trees


def fit_forest(X, y, params: Hyperparams, seed: int) -> Forest:
    """Bagged ensemble: each tree is grown on its own bootstrap of size n."""
    X, y = _check_training(X, y)
    params.validate(X.shape[1])
    n_classes = max(2, int(y.max()) + 1)
    trees = _fit_trees(X, y, params, seed, n_classes)
    return Forest(tuple(trees), params, seed, X.shape[1], n_classes)


def predict(forest: Forest, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    return forest.predict(X)


# --------------------------------------------------------------------------
# model selection


def stratified_folds(y, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Validation index sets; each class is shuffled then dealt round-robin."""
    y = np.asarray(y)
    folds: list[list[int]] = [[] for _ in range(k)]
    for label in np.unique(y):
        members = np.flatnonzero(y == label)
        members = members[rng.permutation(len(members))]
        for j, i in enumerate(members):
            folds[j % k].append(int(i))
    return [np.array(sorted(f), dtype=np.int64) for f in folds]


@dataclass
class GridResult:
    best: Hyperparams
    scores: dict[Hyperparams, float] = field(default_factory=dict)

    def to_csv(self) -> str:
        lines = ["n_trees,max_depth,min_samples_split,features_per_split,mean_accuracy,best"]
        for hp, acc in self.scores.items():
            depth = "none" if hp.max_depth is None else hp.max_depth
            m = "auto" if hp.features_per_split is None else hp.features_per_split
            lines.append(f"{hp.n_trees},{depth},{hp.min_samples_split},{m},{acc:.6f},{int(hp == self.best)}")
        return "\n".join(lines) + "\n"


def _fold_seed(seed: int, fold: int) -> int:
    return int(np.random.SeedSequence([seed, fold]).generate_state(1, np.uint64)[0] >> 1)


def _rank_key(hp: Hyperparams, acc: float):
    depth = math.inf if hp.max_depth is None else hp.max_depth
    return (-acc, hp.n_trees, depth)


def grid_search(X, y, grid: Sequence[Hyperparams], k: int, seed: int) -> GridResult:
    """Stratified k-fold cross-validation over ``grid``.

    Best cell has the highest mean fold accuracy; ties go to fewer trees,
    then shallower depth, then earlier grid position.
    """
    grid = list(dict.fromkeys(grid))
    if not grid:
        raise ValueError("empty hyperparameter grid")
    if k < 2:
        raise ValueError("need at least two folds")
    X, y = _check_training(X, y)
    if len(y) < k or np.bincount(y).min() < k:
        raise ValueError(f"each class needs at least {k} samples for {k} folds")
    for hp in grid:
        hp.validate(X.shape[1])
    n_classes = max(2, int(y.max()) + 1)
    folds = stratified_folds(y, k, np.random.default_rng([seed, 0x5F01D]))

    fold_acc: dict[Hyperparams, list[float]] = {hp: [] for hp in grid}
    # cells differing only in n_trees share one fit and read off vote prefixes
    groups: dict[tuple, list[Hyperparams]] = {}
    for hp in grid:
        groups.setdefault((hp.max_depth, hp.min_samples_split, hp.features_per_split), []).append(hp)
    for f, val in enumerate(folds):
        train = np.setdiff1d(np.arange(len(y)), val, assume_unique=True)
        Xt, yt, Xv, yv = X[train], y[train], X[val], y[val]
        for members in groups.values():
            widest = max(members, key=lambda h: h.n_trees)
            trees = _fit_trees(Xt, yt, widest, _fold_seed(seed, f), n_classes)
            votes = np.zeros((len(yv), n_classes), dtype=np.int64)
            rows = np.arange(len(yv))
            for t, tree in enumerate(trees, start=1):
                np.add.at(votes, (rows, tree.predict(Xv)), 1)
                for hp in (h for h in members if h.n_trees == t):
                    fold_acc[hp].append(float(np.mean(_majority(votes) == yv)))
    scores = {hp: float(np.mean(fold_acc[hp])) for hp in grid}
    order = sorted(range(len(grid)), key=lambda i: (*_rank_key(grid[i], scores[grid[i]]), i))
    return GridResult(grid[order[0]], scores)


# --------------------------------------------------------------------------
# persistence


def dumps(forest: Forest) -> str:
    doc = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "hyperparams": forest.hyperparams._asdict(),
        "seed": forest.seed,
        "n_features": forest.n_features,
        "n_classes": forest.n_classes,
        "node_fields": ["feature", "threshold", "left", "right", "class_counts"],
        "trees": [tree.node_records() for tree in forest.trees],
    }
    return json.dumps(doc, indent=1) + "\n"


def loads(text: str) -> Forest:
    doc = json.loads(text)
    if doc.get("format") != FORMAT_NAME or doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"not a {FORMAT_NAME} v{FORMAT_VERSION} document")
    trees = tuple(Tree.from_node_records(r) for r in doc["trees"])
    hp = Hyperparams(**doc["hyperparams"])
    if len(trees) != hp.n_trees:
        raise ValueError(f"document lists {len(trees)} trees, hyperparameters say {hp.n_trees}")
    return Forest(trees, hp, doc["seed"], doc["n_features"], doc["n_classes"])
