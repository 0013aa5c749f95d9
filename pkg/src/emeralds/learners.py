"""Gradient-boosted trees for malignancy scoring, plus kNN/logistic baselines.

The boosted model fits depth-limited regression trees to the logistic-loss
gradient, one Newton step per leaf, using exact greedy split search. With
``subsample=1`` the training loss never increases between rounds: if a
shrunken Newton step would raise the loss, the tree's step is halved until
it does not.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .errors import DegenerateFeatures, OneClassOnly, SchemaMismatch, TooFewSamples
from .metrics import ConfusionCounts, RocCurve, confusion, roc_curve

__all__ = [
    "CVResult",
    "GbdtConfig",
    "GbdtModel",
    "KnnModel",
    "LogisticModel",
    "Tree",
    "cross_validate",
    "feature_importance",
    "load_model",
    "logistic_loss",
    "predict_proba",
    "save_model",
    "stratified_folds",
    "train_gbdt",
    "train_knn",
    "train_logistic",
]

MODEL_FORMAT = "emeralds-gbdt"
MODEL_VERSION = 1
MARGIN_CLIP = 30.0
_H_EPS = 1e-12
_MIN_GAIN = 1e-12


@dataclass(frozen=True)
class GbdtConfig:
    n_trees: int = 200
    max_depth: int = 3
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    subsample: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.max_depth < 1:
            raise ValueError("n_trees and max_depth must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be at least 1")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must be in (0, 1]")


@dataclass
class Tree:
    """Regression tree in flat-array form. ``feature == -1`` marks a leaf.

    Rows with ``x[feature] <= threshold`` go left.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def apply(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return node
            r, n = rows[active], node[active]
            go_left = X[r, f[active]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_dict(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "left": self.left.tolist(), "right": self.right.tolist(),
                "value": self.value.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(np.asarray(d["feature"], dtype=np.int64),
                   np.asarray(d["threshold"], dtype=np.float64),
                   np.asarray(d["left"], dtype=np.int64),
                   np.asarray(d["right"], dtype=np.int64),
                   np.asarray(d["value"], dtype=np.float64))


@dataclass
class GbdtModel:
    config: GbdtConfig
    columns: Tuple[str, ...]
    base_score: float
    trees: List[Tree] = field(default_factory=list)
    importance: np.ndarray = None
    train_loss_trace: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.importance is None:
            self.importance = np.zeros(len(self.columns))
        self.importance = np.asarray(self.importance, dtype=np.float64)

    def decision_function(self, X) -> np.ndarray:
        X = _check_schema(X, self.columns)
        margin = np.full(X.shape[0], self.base_score)
        for t in self.trees:
            margin += self.config.learning_rate * t.predict(X)
        return margin

    def predict_proba(self, X) -> np.ndarray:
        return expit(np.clip(self.decision_function(X), -MARGIN_CLIP, MARGIN_CLIP))

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "config": asdict(self.config),
            "columns": list(self.columns),
            "base_score": self.base_score,
            "importance": self.importance.tolist(),
            "train_loss_trace": list(self.train_loss_trace),
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        if d.get("format") != MODEL_FORMAT or d.get("version") != MODEL_VERSION:
            raise ValueError("not a supported GBDT model file")
        return cls(GbdtConfig(**d["config"]), tuple(d["columns"]), float(d["base_score"]),
                   [Tree.from_dict(t) for t in d["trees"]], np.asarray(d["importance"]),
                   list(d["train_loss_trace"]))


def _check_schema(X, columns) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != len(columns):
        raise SchemaMismatch(f"expected {len(columns)} columns, got shape {X.shape}")
    return X


def _check_training_data(X, y, columns=None):
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise SchemaMismatch(f"X shape {X.shape} incompatible with {y.shape[0]} labels")
    if np.any((y != 0) & (y != 1)):
        raise ValueError("labels must be binary")
    if not np.all(np.isfinite(X)):
        raise ValueError("features contain missing or non-finite values")
    n_pos = int(y.sum())
    if n_pos < 2 or y.size - n_pos < 2:
        raise OneClassOnly(f"need at least 2 samples per class, got {n_pos}/{y.size - n_pos}")
    if columns is None:
        columns = tuple(f"f{i}" for i in range(X.shape[1]))
    elif len(columns) != X.shape[1]:
        raise SchemaMismatch(f"{len(columns)} column names for {X.shape[1]} columns")
    return X, y.astype(np.float64), tuple(columns)


def logistic_loss(margin: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.logaddexp(0.0, margin) - y * margin))


def _best_split(X, g, h, idx, min_leaf):
    """Exact greedy search; returns (gain, feature, threshold) or None."""
    G, H = g[idx].sum(), h[idx].sum()
    parent = G * G / (H + _H_EPS)
    best = None
    for j in range(X.shape[1]):
        xj = X[idx, j]
        order = np.argsort(xj, kind="stable")
        xs = xj[order]
        gl = np.cumsum(g[idx][order])[:-1]
        hl = np.cumsum(h[idx][order])[:-1]
        n_left = np.arange(1, idx.size)
        ok = (xs[:-1] < xs[1:]) & (n_left >= min_leaf) & (idx.size - n_left >= min_leaf)
        if not ok.any():
            continue
        gr, hr = G - gl, H - hl
        gain = 0.5 * (gl * gl / (hl + _H_EPS) + gr * gr / (hr + _H_EPS) - parent)
        gain = np.where(ok, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > _MIN_GAIN and (best is None or gain[i] > best[0]):
            lo, hi = xs[i], xs[i + 1]
            thr = lo + (hi - lo) / 2.0
            if not lo < thr < hi:
                thr = lo
            best = (float(gain[i]), j, float(thr))
    return best


def _grow_tree(X, g, h, idx, cfg: GbdtConfig, importance: np.ndarray) -> Tree:
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0)):
            arr.append(v)
        return len(feature) - 1

    root = new_node()
    stack = [(root, idx, 0)]
    while stack:
        node, rows, depth = stack.pop()
        split = None
        if depth < cfg.max_depth and rows.size >= 2 * cfg.min_samples_leaf:
            split = _best_split(X, g, h, rows, cfg.min_samples_leaf)
        if split is None:
            value[node] = float(-g[rows].sum() / (h[rows].sum() + _H_EPS))
            continue
        gain, j, thr = split
        importance[j] += gain
        feature[node], threshold[node] = j, thr
        mask = X[rows, j] <= thr
        left[node], right[node] = new_node(), new_node()
        # push right first so the left subtree is numbered first
        stack.append((right[node], rows[~mask], depth + 1))
        stack.append((left[node], rows[mask], depth + 1))

    return Tree(np.asarray(feature, dtype=np.int64), np.asarray(threshold),
                np.asarray(left, dtype=np.int64), np.asarray(right, dtype=np.int64),
                np.asarray(value))


def train_gbdt(rows, labels, cfg: GbdtConfig = GbdtConfig(),
               columns: Optional[Sequence[str]] = None) -> GbdtModel:
    X, y, columns = _check_training_data(rows, labels, columns)
    if np.all(X.max(axis=0) == X.min(axis=0)):
        raise DegenerateFeatures("every feature column is constant")

    prior = y.mean()
    base = float(np.log(prior / (1.0 - prior)))
    margin = np.full(y.size, base)
    importance = np.zeros(X.shape[1])
    trace = [logistic_loss(margin, y)]
    rng = np.random.default_rng(cfg.seed)
    n_sub = max(1, int(round(cfg.subsample * y.size)))
    trees = []
    for _ in range(cfg.n_trees):
        p = expit(margin)
        g, h = p - y, p * (1.0 - p)
        if n_sub < y.size:
            idx = np.sort(rng.choice(y.size, size=n_sub, replace=False))
        else:
            idx = np.arange(y.size)
        tree = _grow_tree(X, g, h, idx, cfg, importance)
        step = cfg.learning_rate * tree.predict(X)
        loss = logistic_loss(margin + step, y)
        for _ in range(60):
            if loss <= trace[-1]:
                break
            tree.value *= 0.5
            step *= 0.5
            loss = logistic_loss(margin + step, y)
        else:
            tree.value[:] = 0.0
            step[:] = 0.0
            loss = trace[-1]
        margin = margin + step
        trees.append(tree)
        trace.append(loss)

    return GbdtModel(cfg, columns, base, trees, importance, trace)


def predict_proba(m, rows) -> np.ndarray:
    """Probability of the positive (malignant) class, strictly inside (0, 1)."""
    return m.predict_proba(rows)


def feature_importance(m: GbdtModel) -> List[str]:
    """Columns sorted by total split gain, descending; ties by column index."""
    order = sorted(range(len(m.columns)), key=lambda j: (-m.importance[j], j))
    return [m.columns[j] for j in order]


def save_model(m: GbdtModel, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(m.to_dict(), sort_keys=True) + "\n")
    return path


def load_model(path) -> GbdtModel:
    return GbdtModel.from_dict(json.loads(Path(path).read_text()))


# --- baselines ------------------------------------------------------------

@dataclass
class KnnModel:
    X: np.ndarray
    y: np.ndarray
    k: int

    def predict_proba(self, rows) -> np.ndarray:
        Q = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        if Q.shape[1] != self.X.shape[1]:
            raise SchemaMismatch(f"expected {self.X.shape[1]} columns, got {Q.shape[1]}")
        d2 = ((Q[:, None, :] - self.X[None, :, :]) ** 2).sum(axis=2)
        # stable sort: equal distances resolve to the lower training index
        nn = np.argsort(d2, axis=1, kind="stable")[:, : self.k]
        return self.y[nn].mean(axis=1)

    def predict(self, rows) -> np.ndarray:
        """Majority vote; an even split goes to the nearest neighbour's label."""
        Q = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        p = self.predict_proba(Q)
        d2 = ((Q[:, None, :] - self.X[None, :, :]) ** 2).sum(axis=2)
        nearest = self.y[np.argsort(d2, axis=1, kind="stable")[:, 0]]
        return np.where(p == 0.5, nearest, p > 0.5).astype(int)


def train_knn(rows, labels, k: int = 10) -> KnnModel:
    X, y, _ = _check_training_data(rows, labels)
    if not 1 <= k <= y.size:
        raise ValueError(f"k must be in 1..{y.size}")
    return KnnModel(X, y, k)


@dataclass
class LogisticModel:
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray
    bias: float
    n_iter: int

    def predict_proba(self, rows) -> np.ndarray:
        Z = (np.atleast_2d(np.asarray(rows, dtype=np.float64)) - self.mean) / self.scale
        if Z.shape[1] != self.weights.size:
            raise SchemaMismatch(f"expected {self.weights.size} columns, got {Z.shape[1]}")
        return expit(np.clip(Z @ self.weights + self.bias, -MARGIN_CLIP, MARGIN_CLIP))


def train_logistic(rows, labels, iters: int = 2000, lr: float = 0.5,
                   tol: float = 1e-7) -> LogisticModel:
    """Batch gradient descent on standardized features."""
    X, y, _ = _check_training_data(rows, labels)
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[scale == 0] = 1.0
    Z = (X - mean) / scale
    w = np.zeros(X.shape[1])
    b = 0.0
    it = 0
    for it in range(1, iters + 1):
        r = expit(Z @ w + b) - y
        gw, gb = Z.T @ r / y.size, r.mean()
        w -= lr * gw
        b -= lr * gb
        if np.sqrt(gw @ gw + gb * gb) < tol:
            break
    return LogisticModel(mean, scale, w, float(b), it)


# --- cross-validation -----------------------------------------------------

def stratified_folds(labels, folds: int, seed: int = 0, groups=None) -> np.ndarray:
    """Fold index per sample, stratified by label.

    Without ``groups`` each class is shuffled and dealt round-robin, so every
    fold's class counts are within one of each other. With ``groups`` whole
    groups are dealt (labelled by their majority class) to the fold holding
    the fewest samples of that class, keeping a group's samples together.
    """
    y = np.asarray(labels).astype(int)
    n = y.size
    n_units = n if groups is None else len(set(groups))
    if folds < 2 or folds > n_units:
        raise TooFewSamples(f"cannot make {folds} folds from {n_units} units")
    rng = np.random.default_rng(seed)
    fold = np.empty(n, dtype=np.int64)
    if groups is None:
        offset = 0
        for cls in (0, 1):
            idx = rng.permutation(np.flatnonzero(y == cls))
            fold[idx] = (offset + np.arange(idx.size)) % folds
            offset = (offset + idx.size) % folds
        return fold

    groups = np.asarray(groups)
    keys = sorted(set(groups.tolist()))
    members = {k: np.flatnonzero(groups == k) for k in keys}
    load = np.zeros((folds, 2), dtype=np.int64)
    for cls in (0, 1):
        bucket = [k for k in keys if int(round(y[members[k]].mean() + 1e-9)) == cls]
        for i in rng.permutation(len(bucket)):
            m = members[bucket[i]]
            f = int(np.lexsort((np.arange(folds), load.sum(axis=1), load[:, cls]))[0])
            fold[m] = f
            load[f, 0] += int((y[m] == 0).sum())
            load[f, 1] += int((y[m] == 1).sum())
    return fold


@dataclass(frozen=True, eq=False)
class CVResult:
    fold_of: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    fold_counts: List[ConfusionCounts]
    roc: RocCurve
    threshold: float = 0.5

    @property
    def pooled(self) -> ConfusionCounts:
        total = ConfusionCounts(0, 0, 0, 0)
        for c in self.fold_counts:
            total = total + c
        return total


def cross_validate(rows, labels, trainer: Callable, folds: int = 5, seed: int = 0,
                   groups=None, threshold: float = 0.5) -> CVResult:
    """Out-of-fold scores from ``trainer(X_train, y_train).predict_proba``.

    A sample is called positive when its score is ``>= threshold``.
    """
    X = np.asarray(rows, dtype=np.float64)
    y = np.asarray(labels).astype(int)
    fold_of = stratified_folds(y, folds, seed, groups)
    scores = np.empty(y.size)
    counts = []
    for f in range(folds):
        test = fold_of == f
        if not test.any():
            continue
        model = trainer(X[~test], y[~test])
        scores[test] = model.predict_proba(X[test])
        counts.append(confusion(y[test], (scores[test] >= threshold).astype(int)))
    return CVResult(fold_of, scores, y, counts, roc_curve(scores, y), threshold)
