"""Classifier portfolio and stratified cross-validation.

Four learners are implemented on top of numpy: a CART decision tree (Gini),
a random forest of those trees, a one-vs-rest linear SVM trained by hinge
subgradient descent, and a one-hidden-layer ReLU network with a softmax
output.  Each comes with a finite hyperparameter grid.
"""

from __future__ import annotations

import math
import time
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .configspace import Configuration, ConfigSpace, boolean, categorical, integer, real
from .errors import IncompatibilityError
from .pipeline import OperatorSignature, PipelineInstance, fit_transform

LEARNER_KINDS = ("decision-tree", "random-forest", "linear-svm", "mlp")
# The hyperparameter grids below are our own choice, not a published reference.
GRID_LABEL = "non-canonical"
MLP_EPOCHS = 100
SVM_BATCH = 16


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    space: ConfigSpace
    default: Configuration

    def __post_init__(self) -> None:
        if self.kind not in LEARNER_KINDS:
            raise ValueError(f"unknown learner {self.kind!r}")
        object.__setattr__(self, "default", self.space.validate(self.default))


def _spec(kind: str, dims, default: dict) -> LearnerSpec:
    return LearnerSpec(kind, ConfigSpace(tuple(dims), name=kind), Configuration(default))


def decision_tree_spec() -> LearnerSpec:
    return _spec(
        "decision-tree",
        [
            categorical("max_depth", (None, 1, 2, 3, 4, 5, 6, 8, 10, 15)),
            integer("min_samples_split", (2, 3, 4, 5, 6, 8, 10, 15)),
            integer("min_samples_leaf", (1, 2, 3, 4, 5, 8)),
            real("max_features", (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0)),
        ],
        {"max_depth": None, "min_samples_split": 2, "min_samples_leaf": 1, "max_features": 1.0},
    )


def random_forest_spec() -> LearnerSpec:
    return _spec(
        "random-forest",
        [
            integer("n_estimators", (5, 10, 25, 50)),
            categorical("max_depth", (None, 2, 4, 6, 8, 10)),
            integer("min_samples_split", (2, 4, 6, 8, 10)),
            integer("min_samples_leaf", (1, 2, 4, 8)),
            categorical("max_features", ("sqrt", 0.25, 0.5, 0.75, 1.0)),
            boolean("bootstrap"),
        ],
        {
            "n_estimators": 10,
            "max_depth": None,
            "min_samples_split": 2,
            "min_samples_leaf": 1,
            "max_features": "sqrt",
            "bootstrap": True,
        },
    )


def linear_svm_spec() -> LearnerSpec:
    return _spec(
        "linear-svm",
        [
            real("C", (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3, 1e4)),
            real("learning_rate", (1e-3, 1e-2, 1e-1, 1.0)),
            integer("epochs", (10, 25, 50, 100)),
            categorical("class_weight", ("none", "balanced")),
            categorical("schedule", ("constant", "invscaling", "pegasos")),
        ],
        {"C": 1.0, "learning_rate": 0.1, "epochs": 50, "class_weight": "none", "schedule": "constant"},
    )


def mlp_spec() -> LearnerSpec:
    return _spec(
        "mlp",
        [
            integer("hidden_units", (10, 25, 50, 100, 150, 200)),
            real("alpha", (1e-5, 1e-4, 1e-3, 1e-2)),
            real("learning_rate", (1e-3, 1e-2, 1e-1)),
            integer("batch_size", (16, 32, 64)),
            real("momentum", (0.0, 0.5, 0.9)),
            real("lr_decay", (0.0, 1e-3, 1e-2)),
        ],
        {"hidden_units": 100, "alpha": 1e-4, "learning_rate": 0.01, "batch_size": 32, "momentum": 0.9, "lr_decay": 0.0},
    )


SPECS = {
    "decision-tree": decision_tree_spec,
    "random-forest": random_forest_spec,
    "linear-svm": linear_svm_spec,
    "mlp": mlp_spec,
}


def learner_spec(kind: str) -> LearnerSpec:
    try:
        return SPECS[kind]()
    except KeyError:
        raise ValueError(f"unknown learner {kind!r}; expected one of {LEARNER_KINDS}") from None


# -- models ---------------------------------------------------------------


class _Model:
    classes: np.ndarray
    n_features: int

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got shape {X.shape}")
        return X


@dataclass
class ConstantModel(_Model):
    label: Any
    n_features: int
    classes: np.ndarray = field(default_factory=lambda: np.array([]))

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        return np.full(X.shape[0], self.label)


@dataclass
class TreeModel(_Model):
    """Flat arrays; ``feature == -1`` marks a leaf."""

    classes: np.ndarray
    n_features: int
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray  # per-node class counts

    def leaf_index(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=int)
        active = self.feature[node] >= 0
        while active.any():
            rows = np.flatnonzero(active)
            n = node[rows]
            go_left = X[rows, self.feature[n]] <= self.threshold[n]
            node[rows] = np.where(go_left, self.left[n], self.right[n])
            active[rows] = self.feature[node[rows]] >= 0
        return node

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        counts = self.value[self.leaf_index(X)]
        return counts / counts.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        return self.classes[np.argmax(self.predict_proba(X), axis=1)]


def _best_split(Xn: np.ndarray, yn: np.ndarray, n_classes: int, features, min_leaf: int):
    n = len(yn)
    best = (math.inf, -1, 0.0)
    onehot = np.eye(n_classes)[yn]
    for f in features:
        order = np.argsort(Xn[:, f], kind="stable")
        xs = Xn[order, f]
        left = np.cumsum(onehot[order], axis=0)[:-1]
        nl = np.arange(1, n, dtype=float)
        valid = (xs[1:] > xs[:-1]) & (nl >= min_leaf) & (n - nl >= min_leaf)
        if not valid.any():
            continue
        right = left[-1] + onehot[order[-1]] - left
        nr = n - nl
        imp = (nl - np.sum(left**2, axis=1) / nl) + (nr - np.sum(right**2, axis=1) / nr)
        imp = np.where(valid, imp, math.inf)
        i = int(np.argmin(imp))
        if imp[i] < best[0]:
            best = (imp[i], int(f), (xs[i] + xs[i + 1]) / 2.0)
    return best


def _n_split_features(max_features, d: int) -> int:
    if max_features == "sqrt":
        return max(1, int(math.sqrt(d)))
    return max(1, min(d, int(float(max_features) * d)))


def fit_tree(
    X: np.ndarray,
    y_idx: np.ndarray,
    classes: np.ndarray,
    rng: np.random.Generator,
    max_depth=None,
    min_samples_split: int = 2,
    min_samples_leaf: int = 1,
    max_features=1.0,
) -> TreeModel:
    n, d = X.shape
    C = len(classes)
    m = _n_split_features(max_features, d)
    feature, threshold, left, right, value = [], [], [], [], []

    def new_node(idx) -> int:
        feature.append(-1)
        threshold.append(0.0)
        left.append(-1)
        right.append(-1)
        value.append(np.bincount(y_idx[idx], minlength=C).astype(float))
        return len(feature) - 1

    stack = [(new_node(np.arange(n)), np.arange(n), 0)]
    while stack:
        node, idx, depth = stack.pop()
        counts = value[node]
        if (
            len(idx) < min_samples_split
            or np.count_nonzero(counts) <= 1
            or (max_depth is not None and depth >= max_depth)
        ):
            continue
        feats = range(d) if m == d else np.sort(rng.choice(d, size=m, replace=False))
        _, f, thr = _best_split(X[idx], y_idx[idx], C, feats, min_samples_leaf)
        if f < 0:
            continue
        mask = X[idx, f] <= thr
        li, ri = idx[mask], idx[~mask]
        feature[node], threshold[node] = f, thr
        left[node] = new_node(li)
        right[node] = new_node(ri)
        stack.append((right[node], ri, depth + 1))
        stack.append((left[node], li, depth + 1))
    return TreeModel(
        classes, d, np.array(feature), np.array(threshold), np.array(left), np.array(right), np.array(value)
    )


@dataclass
class ForestModel(_Model):
    classes: np.ndarray
    n_features: int
    trees: list[TreeModel]

    def predict(self, X) -> np.ndarray:
        X = self._check(X)
        proba = sum(t.predict_proba(X) for t in self.trees) / len(self.trees)
        return self.classes[np.argmax(proba, axis=1)]


@dataclass
class LinearSVMModel(_Model):
    """Binary when ``W`` has one row (positive class ``classes[1]``), else one-vs-rest."""

    classes: np.ndarray
    n_features: int
    W: np.ndarray
    b: np.ndarray

    def decision_function(self, X) -> np.ndarray:
        X = self._check(X)
        return X @ self.W.T + self.b

    def predict(self, X) -> np.ndarray:
        s = np.nan_to_num(self.decision_function(X), nan=-np.inf)
        if self.W.shape[0] == 1:
            return np.where(s[:, 0] > 0, self.classes[1], self.classes[0])
        return self.classes[np.argmax(s, axis=1)]


@dataclass
class MLPModel(_Model):
    classes: np.ndarray
    n_features: int
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def predict_proba(self, X) -> np.ndarray:
        X = self._check(X)
        return _softmax(np.maximum(X @ self.W1 + self.b1, 0.0) @ self.W2 + self.b2)

    def predict(self, X) -> np.ndarray:
        p = np.nan_to_num(self.predict_proba(X), nan=-np.inf)
        return self.classes[np.argmax(p, axis=1)]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _train_svm(X, y_idx, classes, cfg, rng) -> LinearSVMModel:
    n, d = X.shape
    C = len(classes)
    if C == 2:
        Y = np.where(y_idx == 1, 1.0, -1.0)[:, None]
    else:
        Y = np.where(y_idx[:, None] == np.arange(C)[None, :], 1.0, -1.0)
    if cfg["class_weight"] == "balanced":
        counts = np.bincount(y_idx, minlength=C)
        sw = n / (C * counts[y_idx])
    else:
        sw = np.ones(n)
    lam = 1.0 / (cfg["C"] * n)
    W = np.zeros((Y.shape[1], d))
    b = np.zeros(Y.shape[1])
    W_avg, b_avg = np.zeros_like(W), np.zeros_like(b)
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for _ in range(cfg["epochs"]):
            perm = rng.permutation(n)
            for start in range(0, n, SVM_BATCH):
                bi = perm[start : start + SVM_BATCH]
                t += 1
                if cfg["schedule"] == "pegasos":
                    eta = 1.0 / (lam * t)
                elif cfg["schedule"] == "invscaling":
                    eta = cfg["learning_rate"] / math.sqrt(t)
                else:
                    eta = cfg["learning_rate"]
                Xb, Yb = X[bi], Y[bi]
                margin = Yb * (Xb @ W.T + b)
                coef = Yb * (margin < 1.0) * sw[bi, None]
                W -= eta * (lam * W - coef.T @ Xb / len(bi))
                b += eta * coef.mean(axis=0)
                if cfg["schedule"] == "pegasos":
                    norms = np.linalg.norm(W, axis=1)
                    cap = 1.0 / math.sqrt(lam)
                    W *= np.minimum(1.0, cap / np.maximum(norms, 1e-300))[:, None]
                # running Polyak average of the iterates
                W_avg += (W - W_avg) / t
                b_avg += (b - b_avg) / t
    return LinearSVMModel(classes, d, W_avg, b_avg)


def _train_mlp(X, y_idx, classes, cfg, rng) -> MLPModel:
    n, d = X.shape
    C = len(classes)
    h = cfg["hidden_units"]
    W1 = rng.normal(0.0, math.sqrt(2.0 / d), size=(d, h))
    b1 = np.zeros(h)
    W2 = rng.normal(0.0, math.sqrt(2.0 / h), size=(h, C))
    b2 = np.zeros(C)
    params = [W1, b1, W2, b2]
    vel = [np.zeros_like(p) for p in params]
    Y = np.eye(C)[y_idx]
    bs = cfg["batch_size"]
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(MLP_EPOCHS):
            lr = cfg["learning_rate"] / (1.0 + cfg["lr_decay"] * epoch)
            perm = rng.permutation(n)
            for start in range(0, n, bs):
                bi = perm[start : start + bs]
                Xb, Yb = X[bi], Y[bi]
                H = np.maximum(Xb @ W1 + b1, 0.0)
                P = _softmax(H @ W2 + b2)
                G = (P - Yb) / len(bi)
                gW2 = H.T @ G + cfg["alpha"] * W2
                gb2 = G.sum(axis=0)
                GH = (G @ W2.T) * (H > 0)
                gW1 = Xb.T @ GH + cfg["alpha"] * W1
                gb1 = GH.sum(axis=0)
                for p, v, g in zip(params, vel, (gW1, gb1, gW2, gb2)):
                    v *= cfg["momentum"]
                    v -= lr * g
                    p += v
    return MLPModel(classes, d, W1, b1, W2, b2)


def train(spec: LearnerSpec, config: Mapping[str, Any], X, y, rng: np.random.Generator):
    """Fit a model; single-class data yields a constant predictor."""
    cfg = dict(spec.space.validate(config))
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    if X.ndim != 2 or X.shape[0] == 0 or X.shape[0] != len(y):
        raise ValueError(f"inconsistent training data: X {X.shape}, y {y.shape}")
    classes, y_idx = np.unique(y, return_inverse=True)
    if len(classes) == 1:
        return ConstantModel(classes[0], X.shape[1], classes)
    if spec.kind == "decision-tree":
        return fit_tree(X, y_idx, classes, rng, **cfg)
    if spec.kind == "random-forest":
        n = len(y)
        trees = []
        for _ in range(cfg["n_estimators"]):
            rows = rng.integers(n, size=n) if cfg["bootstrap"] else np.arange(n)
            sub_y = y_idx[rows]
            trees.append(
                fit_tree(
                    X[rows], sub_y, classes, rng,
                    max_depth=cfg["max_depth"],
                    min_samples_split=cfg["min_samples_split"],
                    min_samples_leaf=cfg["min_samples_leaf"],
                    max_features=cfg["max_features"],
                )
            )
        return ForestModel(classes, X.shape[1], trees)
    if spec.kind == "linear-svm":
        return _train_svm(X, y_idx, classes, cfg, rng)
    return _train_mlp(X, y_idx, classes, cfg, rng)


def predict(model, X) -> np.ndarray:
    return model.predict(X)


# -- cross-validation ------------------------------------------------------


def stratified_folds(y, k: int, rng: np.random.Generator) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint stratified k-fold split; per-class fold sizes differ by at most one."""
    y = np.asarray(y)
    if k < 2:
        raise ValueError("need at least two folds")
    classes, counts = np.unique(y, return_counts=True)
    if counts.min() < k:
        raise ValueError(f"class {classes[np.argmin(counts)]!r} has {counts.min()} samples, fewer than k={k}")
    fold_of = np.empty(len(y), dtype=int)
    offset = 0
    for c in classes:
        idx = rng.permutation(np.flatnonzero(y == c))
        fold_of[idx] = (offset + np.arange(len(idx))) % k
        offset = (offset + len(idx)) % k
    return [(np.flatnonzero(fold_of != f), np.flatnonzero(fold_of == f)) for f in range(k)]


@dataclass(frozen=True)
class CvResult:
    mean_accuracy: float
    fold_accuracies: tuple[float, ...]
    wall_time: float
    error: str | None = None
    evals: int = 1

    @property
    def incompatible(self) -> bool:
        return self.error is not None

    @property
    def loss(self) -> float:
        return math.inf if self.incompatible else 1.0 - self.mean_accuracy

    @classmethod
    def failed(cls, error: str, wall_time: float = 0.0) -> CvResult:
        return cls(math.nan, (), wall_time, error)


@dataclass(frozen=True)
class FoldData:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray


def fold_rngs(seed: int, fold: int) -> tuple[np.random.Generator, np.random.Generator]:
    """Independent generators for pipeline fitting and model training in one fold."""
    pipe_ss, model_ss = np.random.SeedSequence([seed, fold]).spawn(2)
    return np.random.default_rng(pipe_ss), np.random.default_rng(model_ss)


def transform_folds(
    inst: PipelineInstance,
    catalog: Mapping[str, OperatorSignature],
    X,
    y,
    folds: Sequence[tuple[np.ndarray, np.ndarray]],
    seed: int,
) -> list[FoldData]:
    """Fit the pipeline on each training part and apply it to the validation part."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    out = []
    for f, (tr, va) in enumerate(folds):
        pipe_rng, _ = fold_rngs(seed, f)
        Xt, yt, fitted = fit_transform(inst, X[tr], y[tr], catalog, pipe_rng)
        try:
            Xv = fitted.apply(X[va])
        except ValueError as exc:
            raise IncompatibilityError(str(exc), node="apply") from exc
        out.append(FoldData(Xt, yt, Xv, y[va]))
    return out


def score_folds(fold_data: Sequence[FoldData], spec: LearnerSpec, config: Mapping[str, Any], seed: int) -> CvResult:
    start = time.perf_counter()
    accs = []
    for f, fd in enumerate(fold_data):
        _, model_rng = fold_rngs(seed, f)
        model = train(spec, config, fd.X_train, fd.y_train, model_rng)
        accs.append(float(np.mean(model.predict(fd.X_val) == fd.y_val)))
    return CvResult(float(np.mean(accs)), tuple(accs), time.perf_counter() - start)


def cross_val_score(
    inst: PipelineInstance,
    catalog: Mapping[str, OperatorSignature],
    spec: LearnerSpec,
    config: Mapping[str, Any],
    X,
    y,
    folds: Sequence[tuple[np.ndarray, np.ndarray]],
    seed: int,
) -> CvResult:
    """Mean validation accuracy; any pipeline incompatibility fails the whole evaluation."""
    start = time.perf_counter()
    try:
        data = transform_folds(inst, catalog, X, y, folds, seed)
    except IncompatibilityError as exc:
        return CvResult.failed(str(exc), time.perf_counter() - start)
    res = score_folds(data, spec, config, seed)
    return CvResult(res.mean_accuracy, res.fold_accuracies, time.perf_counter() - start)
