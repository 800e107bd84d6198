"""Preprocessing operators: rebalancing, scaling and feature construction.

Every ``*_fit`` function takes the training matrix (and labels where needed)
and returns a :class:`FittedFunctor`.  Rebalancing operators also return the
resampled training set; their functor is the identity because they only ever
touch training data.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .configspace import ConfigSpace, boolean, categorical, integer
from .errors import IncompatibilityError
from .pipeline import NUMERIC_MATRIX, OperatorSignature

GOLDEN_ITERATIONS = 64
YJ_BOUNDS = (-5.0, 5.0)
QUANTILE_RANGES = ((25, 75), (10, 90), (5, 95))
K_FRACTIONS = (0.25, 0.5, 0.75, 1.0)
NEIGHBOR_GRID = (1, 3, 5)
NEARMISS_VERSIONS = (1, 2, 3)
NEARMISS_NEIGHBORS = 3


@dataclass(frozen=True)
class FittedFunctor:
    """Row-wise transformation learned from a training set."""

    kind: str
    params: Mapping[str, Any] = field(default_factory=dict)

    @property
    def is_identity(self) -> bool:
        return self.kind == "identity"

    def transform(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        p = self.params
        if self.kind == "identity":
            return X
        if X.ndim != 2 or X.shape[1] != p["n_features_in"]:
            raise ValueError(
                f"{self.kind}: expected {p['n_features_in']} columns, got shape {X.shape}"
            )
        if self.kind in ("standard", "robust", "minmax"):
            return (X - p["offset"]) / p["scale"]
        if self.kind == "power":
            Z = np.column_stack([yeo_johnson(X[:, j], lam) for j, lam in enumerate(p["lambdas"])])
            return (Z - p["mean"]) / p["std"]
        if self.kind == "pca":
            return (X - p["mean"]) @ p["components"].T
        if self.kind == "select":
            return X[:, p["indices"]]
        raise ValueError(f"unknown functor kind {self.kind!r}")


IDENTITY = FittedFunctor("identity")


def _check_nonempty(X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise IncompatibilityError(f"expected a non-empty matrix, got shape {X.shape}")
    return X


# -- scalers -------------------------------------------------------------


def standard_scaler_fit(X, with_mean: bool = True, with_std: bool = True) -> FittedFunctor:
    X = _check_nonempty(X)
    d = X.shape[1]
    if not with_mean and not with_std:
        return IDENTITY
    offset = X.mean(axis=0) if with_mean else np.zeros(d)
    scale = np.ones(d)
    if with_std:
        std = X.std(axis=0)
        scale = np.where(std == 0.0, 1.0, std)
    return FittedFunctor("standard", {"offset": offset, "scale": scale, "n_features_in": d})


def robust_scaler_fit(
    X, with_centering: bool = True, with_scaling: bool = True, quantile_range=(25, 75)
) -> FittedFunctor:
    """Median centering and inter-quantile scaling (linear interpolation)."""
    X = _check_nonempty(X)
    d = X.shape[1]
    if not with_centering and not with_scaling:
        return IDENTITY
    lo, hi = quantile_range
    offset = np.median(X, axis=0) if with_centering else np.zeros(d)
    scale = np.ones(d)
    if with_scaling:
        q = np.percentile(X, [lo, hi], axis=0, method="linear")
        iqr = q[1] - q[0]
        scale = np.where(iqr == 0.0, 1.0, iqr)
    return FittedFunctor("robust", {"offset": offset, "scale": scale, "n_features_in": d})


def minmax_fit(X) -> FittedFunctor:
    X = _check_nonempty(X)
    lo = X.min(axis=0)
    span = X.max(axis=0) - lo
    return FittedFunctor(
        "minmax",
        {"offset": lo, "scale": np.where(span == 0.0, 1.0, span), "n_features_in": X.shape[1]},
    )


def yeo_johnson(x: np.ndarray, lam: float) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    if abs(lam) < 1e-12:
        out[pos] = np.log1p(x[pos])
    else:
        out[pos] = (np.power(x[pos] + 1.0, lam) - 1.0) / lam
    if abs(lam - 2.0) < 1e-12:
        out[~pos] = -np.log1p(-x[~pos])
    else:
        out[~pos] = -(np.power(1.0 - x[~pos], 2.0 - lam) - 1.0) / (2.0 - lam)
    return out


def yeo_johnson_llf(x: np.ndarray, lam: float) -> float:
    """Profile Gaussian log-likelihood of the Yeo-Johnson transformed sample."""
    n = len(x)
    with np.errstate(over="ignore", invalid="ignore"):
        z = yeo_johnson(x, lam)
        var = z.var()
    if not np.isfinite(var) or var <= 0.0:
        return -math.inf
    return -0.5 * n * math.log(var) + (lam - 1.0) * float(np.sum(np.sign(x) * np.log1p(np.abs(x))))


def golden_section_max(f: Callable[[float], float], lo: float, hi: float, iters: int) -> float:
    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = f(d)
    return (a + b) / 2.0


def power_transform_fit(X) -> FittedFunctor:
    """Per-column Yeo-Johnson followed by standardization."""
    X = _check_nonempty(X)
    lambdas = []
    for j in range(X.shape[1]):
        col = X[:, j]
        if np.ptp(col) == 0.0:
            lambdas.append(1.0)
            continue
        lambdas.append(golden_section_max(lambda lam: yeo_johnson_llf(col, lam), *YJ_BOUNDS, GOLDEN_ITERATIONS))
    Z = np.column_stack([yeo_johnson(X[:, j], lam) for j, lam in enumerate(lambdas)])
    std = Z.std(axis=0)
    return FittedFunctor(
        "power",
        {
            "lambdas": np.asarray(lambdas),
            "mean": Z.mean(axis=0),
            "std": np.where(std == 0.0, 1.0, std),
            "n_features_in": X.shape[1],
        },
    )


# -- feature selection and projection ------------------------------------


def f_score(column, y) -> float:
    """One-way ANOVA F statistic of ``column`` grouped by ``y``.

    Zero within-group variance yields ``inf`` when the group means differ and
    ``0`` when they do not.
    """
    x = np.asarray(column, dtype=float)
    y = np.asarray(y)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("f_score needs at least two classes")
    grand = x.mean()
    ssb = 0.0
    ssw = 0.0
    for c in classes:
        g = x[y == c]
        m = g.mean()
        ssb += len(g) * (m - grand) ** 2
        ssw += float(np.sum((g - m) ** 2))
    dfb = len(classes) - 1
    dfw = len(x) - len(classes)
    msb = ssb / dfb
    msw = ssw / dfw if dfw > 0 else 0.0
    if msw == 0.0:
        return math.inf if msb > 0.0 else 0.0
    return msb / msw


def f_scores(X, y) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.array([f_score(X[:, j], y) for j in range(X.shape[1])])


def select_k_best_fit(X, y, k: int) -> FittedFunctor:
    """Keep the ``k`` highest-F columns (ties to the lower index), in column order."""
    X = _check_nonempty(X)
    d = X.shape[1]
    if not 1 <= k <= d:
        raise IncompatibilityError(f"SelectKBest: k={k} outside [1, {d}]")
    scores = f_scores(X, y)
    order = sorted(range(d), key=lambda j: (-scores[j], j))
    indices = np.array(sorted(order[:k]), dtype=int)
    return FittedFunctor("select", {"indices": indices, "scores": scores, "n_features_in": d})


def pca_fit(X, k: int) -> FittedFunctor:
    X = _check_nonempty(X)
    n, d = X.shape
    if not 1 <= k <= min(n - 1, d):
        raise IncompatibilityError(f"PCA: k={k} outside [1, {min(n - 1, d)}]")
    mean = X.mean(axis=0)
    _, s, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k].copy()
    # deterministic sign: largest-magnitude loading is positive
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    return FittedFunctor(
        "pca",
        {
            "mean": mean,
            "components": comps,
            "explained_variance": s[:k] ** 2 / (n - 1),
            "n_features_in": d,
        },
    )


# -- rebalancing ----------------------------------------------------------


def _pairwise(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    sq = np.sum(A**2, axis=1)[:, None] + np.sum(B**2, axis=1)[None, :] - 2.0 * A @ B.T
    return np.sqrt(np.maximum(sq, 0.0))


def _class_counts(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    classes, counts = np.unique(y, return_counts=True)
    if len(classes) < 2:
        raise IncompatibilityError("rebalancing needs at least two classes")
    return classes, counts


def smote_fit(X, y, k_neighbors: int, rng: np.random.Generator):
    """Oversample every non-majority class up to the majority count."""
    X = _check_nonempty(X)
    y = np.asarray(y)
    classes, counts = _class_counts(y)
    target = counts.max()
    new_X, new_y = [X], [y]
    for c, n_c in zip(classes, counts):
        need = target - n_c
        if need == 0:
            continue
        if n_c < 2:
            raise IncompatibilityError(f"SMOTE: class {c} has a single sample")
        if k_neighbors > n_c - 1:
            raise IncompatibilityError(f"SMOTE: k_neighbors={k_neighbors} but class {c} has {n_c} samples")
        Xc = X[y == c]
        D = _pairwise(Xc, Xc)
        np.fill_diagonal(D, np.inf)
        nn = np.argsort(D, axis=1, kind="stable")[:, :k_neighbors]
        base = rng.integers(n_c, size=need)
        pick = nn[base, rng.integers(k_neighbors, size=need)]
        u = rng.random(need)[:, None]
        new_X.append(Xc[base] + u * (Xc[pick] - Xc[base]))
        new_y.append(np.full(need, c, dtype=y.dtype))
    return np.vstack(new_X), np.concatenate(new_y), IDENTITY


def nearmiss_fit(X, y, version: int, rng: np.random.Generator | None = None):
    """Undersample every non-minority class down to the minority count.

    Version 1 keeps points with the smallest mean distance to their nearest
    minority neighbours, version 2 uses the farthest minority points, and
    version 3 first restricts to majority points that are near neighbours of
    some minority point, then prefers the largest mean distance.
    """
    X = _check_nonempty(X)
    y = np.asarray(y)
    if version not in NEARMISS_VERSIONS:
        raise IncompatibilityError(f"NearMiss: unknown version {version}")
    classes, counts = _class_counts(y)
    minority = classes[int(np.argmin(counts))]
    target = counts.min()
    Xmin = X[y == minority]
    k = min(NEARMISS_NEIGHBORS, target)
    keep = [np.flatnonzero(y == minority)]
    for c, n_c in zip(classes, counts):
        if c == minority:
            continue
        idx = np.flatnonzero(y == c)
        if n_c == target:
            keep.append(idx)
            continue
        D = np.sort(_pairwise(X[idx], Xmin), axis=1)
        near = D[:, :k].mean(axis=1)
        if version == 1:
            order = np.argsort(near, kind="stable")
        elif version == 2:
            order = np.argsort(D[:, -k:].mean(axis=1), kind="stable")
        else:
            m = min(NEARMISS_NEIGHBORS, n_c)
            cand_rows = np.argsort(_pairwise(Xmin, X[idx]), axis=1, kind="stable")[:, :m]
            cand = np.unique(cand_rows)
            rest = np.setdiff1d(np.arange(n_c), cand)
            first = cand[np.argsort(-near[cand], kind="stable")]
            second = rest[np.argsort(near[rest], kind="stable")]
            order = np.concatenate([first, second])
        keep.append(idx[order[:target]])
    rows = np.sort(np.concatenate(keep))
    return X[rows], y[rows], IDENTITY


def knn_vote(D_row: np.ndarray, labels: np.ndarray, k: int):
    """Majority label of the ``k`` nearest; ties go to the class seen first."""
    order = np.argsort(D_row, kind="stable")[:k]
    votes: dict[Any, int] = {}
    for i in order:
        votes[labels[i]] = votes.get(labels[i], 0) + 1
    best = max(votes.values())
    for i in order:
        if votes[labels[i]] == best:
            return labels[i]
    raise AssertionError("unreachable")


def cnn_fit(X, y, n_neighbors: int, rng: np.random.Generator):
    """Hart's condensed nearest neighbour rule."""
    X = _check_nonempty(X)
    y = np.asarray(y)
    _class_counts(y)
    perm = rng.permutation(len(y))
    kept: list[int] = []
    seen = set()
    for i in perm:
        if y[i] not in seen:
            seen.add(y[i])
            kept.append(int(i))
    kept_set = set(kept)
    D = _pairwise(X, X)
    changed = True
    while changed:
        changed = False
        for i in perm:
            if i in kept_set:
                continue
            k = min(n_neighbors, len(kept))
            idx = np.asarray(kept)
            if knn_vote(D[i, idx], y[idx], k) != y[i]:
                kept.append(int(i))
                kept_set.add(int(i))
                changed = True
    rows = np.sort(np.asarray(kept))
    return X[rows], y[rows], IDENTITY


# -- catalog --------------------------------------------------------------


def k_grid(n_features: int) -> tuple[int, ...]:
    """Dataset-relative k values: 25/50/75/100 % of the feature count, rounded up."""
    return tuple(sorted({max(1, math.ceil(f * n_features - 1e-9)) for f in K_FRACTIONS}))


def _resampler(fn, param):
    def fit(X, y, params, rng):
        return fn(X, y, params[param], rng)

    return fit


def _transformer(fn, needs_y=False):
    def fit(X, y, params, rng):
        functor = fn(X, y, **params) if needs_y else fn(X, **params)
        return functor.transform(X), y, functor

    return fit


def _space(name: str, *dims) -> ConfigSpace:
    return ConfigSpace(tuple(dims), name=name)


def appendix_a_catalog(n_features: int) -> dict[str, OperatorSignature]:
    """Rebalance / normalize / feature operators with their finite grids."""
    ks = k_grid(n_features)
    sig = OperatorSignature
    M = NUMERIC_MATRIX
    entries = [
        sig("NearMiss", M, M, _space("NearMiss", integer("version", NEARMISS_VERSIONS)), True,
            _resampler(nearmiss_fit, "version")),
        sig("CondensedNearestNeighbour", M, M,
            _space("CondensedNearestNeighbour", integer("n_neighbors", NEIGHBOR_GRID)), True,
            _resampler(cnn_fit, "n_neighbors")),
        sig("SMOTE", M, M, _space("SMOTE", integer("k_neighbors", NEIGHBOR_GRID)), True,
            _resampler(smote_fit, "k_neighbors")),
        sig("StandardScaler", M, M, _space("StandardScaler", boolean("with_mean"), boolean("with_std")),
            False, _transformer(standard_scaler_fit)),
        sig("PowerTransformer", M, M, _space("PowerTransformer"), False, _transformer(power_transform_fit)),
        sig("MinMaxScaler", M, M, _space("MinMaxScaler"), False, _transformer(minmax_fit)),
        sig("RobustScaler", M, M,
            _space("RobustScaler", boolean("with_centering"), boolean("with_scaling"),
                   categorical("quantile_range", QUANTILE_RANGES)),
            False, _transformer(robust_scaler_fit)),
        sig("PCA", M, M, _space("PCA", integer("k", ks)), False, _transformer(pca_fit)),
        sig("SelectKBest", M, M, _space("SelectKBest", integer("k", ks)), False,
            _transformer(select_k_best_fit, needs_y=True)),
    ]
    return {e.name: e for e in entries}


def custom_operator(name: str, space: ConfigSpace, fit, *, train_only: bool = False,
                    input_kind=NUMERIC_MATRIX, output_kind=NUMERIC_MATRIX) -> OperatorSignature:
    """Build a signature for a user-supplied operator."""
    return OperatorSignature(name, input_kind, output_kind, space, train_only, fit)


def transformer_operator(name: str, space: ConfigSpace, fn, needs_y: bool = False) -> OperatorSignature:
    """Wrap a ``fn(X, **params) -> FittedFunctor`` as a numeric-matrix operator."""
    return custom_operator(name, space, _transformer(fn, needs_y))
