"""Radiomic stratification: standardize, PCA, k-means with silhouette-selected k,
and cluster-balanced cross-validation folds.

The estimators follow the scikit-learn protocol (``fit`` returns ``self``,
fitted attributes end in ``_``, hyper-parameters live in ``__init__``) so
they compose with ``sklearn.pipeline.Pipeline``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.base import BaseEstimator, ClusterMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_table

DEFAULT_K_RANGE = tuple(range(2, 13))


class StandardScaler(TransformerMixin, BaseEstimator):
    """Zero-mean, unit (population) standard deviation columns.

    Constant columns map to 0.
    """

    def fit(self, X, y=None):
        X = check_table(X, min_rows=2)
        self.mean_ = X.mean(0)
        self.scale_ = X.std(0)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = check_table(X)
        safe = np.where(self.scale_ > 0, self.scale_, 1.0)
        return np.where(self.scale_ > 0, (X - self.mean_) / safe, 0.0)


class PCA(TransformerMixin, BaseEstimator):
    """Principal components keeping the smallest count whose cumulative
    explained-variance ratio reaches ``retention``.

    Components are rows of ``components_``; each is sign-fixed so its
    largest-magnitude entry is positive. If every row is identical the
    model keeps one zero-variance component and sets ``degenerate_``.
    """

    def __init__(self, retention: float = 0.99):
        self.retention = retention

    def fit(self, X, y=None):
        if not 0 < self.retention <= 1:
            raise ValueError(f"retention must lie in (0, 1], got {self.retention}")
        X = check_table(X, min_rows=2)
        if not np.all(np.isfinite(X)):
            raise ValueError("PCA input must be finite")
        self.mean_ = X.mean(0)
        centered = X - self.mean_
        _, sing, vt = np.linalg.svd(centered, full_matrices=False)
        var = sing ** 2 / X.shape[0]
        total = var.sum()
        idx = np.argmax(np.abs(vt), axis=1)
        vt = vt * np.sign(vt[np.arange(len(vt)), idx])[:, None]
        if total <= 0:
            self.degenerate_ = True
            self.n_components_ = 1
            self.components_ = vt[:1]
            self.explained_variance_ = np.zeros(1)
            self.explained_variance_ratio_ = np.zeros(1)
            return self
        ratio = var / total
        cumulative = np.cumsum(ratio)
        n = int(np.searchsorted(cumulative, self.retention - 1e-12)) + 1
        self.degenerate_ = False
        self.n_components_ = min(n, len(ratio))
        self.components_ = vt[: self.n_components_]
        self.explained_variance_ = var[: self.n_components_]
        self.explained_variance_ratio_ = ratio[: self.n_components_]
        return self

    def transform(self, X):
        check_is_fitted(self, "components_")
        return (check_table(X) - self.mean_) @ self.components_.T

    def inverse_transform(self, Z):
        return np.asarray(Z) @ self.components_ + self.mean_


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    chosen = [int(rng.integers(n))]
    closest = np.sum((X - X[chosen[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = closest.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=closest / total))
        else:
            # all remaining points coincide with a centroid; pick an unused index
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        closest = np.minimum(closest, np.sum((X - X[nxt]) ** 2, axis=1))
    return X[chosen].copy()


def _lloyd(X, centroids, max_iter):
    history = []
    labels = None
    for _ in range(max_iter):
        d2 = cdist(X, centroids, "sqeuclidean")
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(len(centroids)):
            members = X[labels == c]
            if len(members):
                centroids[c] = members.mean(0)
            else:
                # re-seed an empty cluster at the point farthest from its centroid
                far = int(np.argmax(d2[np.arange(len(X)), labels]))
                centroids[c] = X[far]
    d2 = cdist(X, centroids, "sqeuclidean")
    labels = np.argmin(d2, axis=1)
    inertia = float(d2[np.arange(len(X)), labels].sum())
    return centroids, labels, inertia, history


class KMeans(ClusterMixin, BaseEstimator):
    """Lloyd's k-means with k-means++ seeding.

    ``n_init`` restarts use seeds drawn from ``random_state``; the run with
    the lowest inertia wins, ties going to the earlier restart, so the
    result does not depend on restart scheduling.
    """

    def __init__(self, n_clusters: int = 8, n_init: int = 10, max_iter: int = 300, random_state: int = 0):
        self.n_clusters = n_clusters
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_table(X)
        k = self.n_clusters
        if k < 1:
            raise ValueError("n_clusters must be positive")
        if len(X) < k:
            raise ValueError(f"n_samples={len(X)} must be >= n_clusters={k}")
        seeds = np.random.SeedSequence(self.random_state).generate_state(self.n_init)
        best = None
        for restart, seed in enumerate(seeds):
            rng = np.random.default_rng(int(seed))
            result = _lloyd(X, _kmeans_pp(X, k, rng), self.max_iter)
            if best is None or result[2] < best[0][2]:
                best = (result, restart)
        (centroids, labels, inertia, history), restart = best
        self.cluster_centers_ = centroids
        self.labels_ = labels
        self.inertia_ = inertia
        self.inertia_history_ = history
        self.best_restart_ = restart
        return self

    def predict(self, X):
        check_is_fitted(self, "cluster_centers_")
        return nearest_centroid(check_table(X), self.cluster_centers_)


def nearest_centroid(X, centroids) -> np.ndarray:
    """Index of the closest centroid per row; ties go to the lower index."""
    return np.argmin(cdist(np.atleast_2d(X), centroids, "sqeuclidean"), axis=1)


def silhouette_score(X, labels) -> float:
    """Mean silhouette (Euclidean); singleton clusters contribute 0."""
    X = check_table(X)
    labels = np.asarray(labels)
    ids, inverse, counts = np.unique(labels, return_inverse=True, return_counts=True)
    if len(ids) < 2:
        raise ValueError("silhouette needs at least 2 clusters")
    dist = cdist(X, X)
    onehot = np.zeros((len(X), len(ids)))
    onehot[np.arange(len(X)), inverse] = 1.0
    sums = dist @ onehot
    own = counts[inverse]
    a = sums[np.arange(len(X)), inverse] / np.maximum(own - 1, 1)
    mean_other = sums / counts
    mean_other[np.arange(len(X)), inverse] = np.inf
    b = mean_other.min(1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def select_k(X, k_range=DEFAULT_K_RANGE, n_init: int = 10, max_iter: int = 300, random_state: int = 0):
    """Grid-search k by silhouette; returns ``(k, fitted KMeans, scores)``.

    Ties go to the smaller k.
    """
    X = check_table(X)
    k_range = sorted(set(int(k) for k in k_range))
    if not k_range:
        raise ValueError("k_range is empty")
    if k_range[0] < 2 or k_range[-1] > len(X) - 1:
        raise ValueError(f"k_range must lie within [2, {len(X) - 1}] for {len(X)} samples")
    best, scores = None, {}
    for k in k_range:
        model = KMeans(k, n_init=n_init, max_iter=max_iter, random_state=random_state).fit(X)
        if len(np.unique(model.labels_)) < 2:
            scores[k] = -1.0
        else:
            scores[k] = silhouette_score(X, model.labels_)
        if best is None or scores[k] > scores[best[0]]:
            best = (k, model)
    return best[0], best[1], scores


@dataclass
class FoldAssignment:
    fold_of: dict
    cluster_of: dict
    n_folds: int

    def fold_counts(self) -> dict:
        """``{cluster: [count in fold 0, ..., count in fold n-1]}``."""
        out = {}
        for cid, c in self.cluster_of.items():
            out.setdefault(c, [0] * self.n_folds)[self.fold_of[cid]] += 1
        return dict(sorted(out.items()))

    def to_json(self) -> str:
        doc = {
            "n_folds": self.n_folds,
            "folds": {cid: self.fold_of[cid] for cid in sorted(self.fold_of)},
            "clusters": {cid: int(self.cluster_of[cid]) for cid in sorted(self.cluster_of)},
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FoldAssignment":
        doc = json.loads(text)
        return cls(fold_of=doc["folds"], cluster_of=doc["clusters"], n_folds=doc["n_folds"])

    def to_csv(self) -> str:
        lines = ["case_id,cluster,fold"]
        lines += [f"{cid},{self.cluster_of[cid]},{self.fold_of[cid]}" for cid in sorted(self.fold_of)]
        return "\n".join(lines) + "\n"


def assign_folds(cluster_of: dict, n_folds: int = 5, seed: int = 0) -> FoldAssignment:
    """Deal each cluster's shuffled cases round-robin over the folds.

    The dealing position carries over between clusters, so overall fold
    sizes stay within one of each other as well.
    """
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    rng = np.random.default_rng(seed)
    by_cluster = {}
    for cid in sorted(cluster_of):
        by_cluster.setdefault(int(cluster_of[cid]), []).append(cid)
    fold_of, position = {}, 0
    for cluster in sorted(by_cluster):
        members = by_cluster[cluster]
        for i in rng.permutation(len(members)):
            fold_of[members[i]] = position % n_folds
            position += 1
    return FoldAssignment(fold_of=fold_of, cluster_of={c: int(v) for c, v in cluster_of.items()}, n_folds=n_folds)


class Stratifier(ClusterMixin, TransformerMixin, BaseEstimator):
    """Standardize -> PCA -> silhouette-selected k-means, as one estimator.

    ``transform`` maps feature rows into PCA space; ``predict`` returns the
    nearest centroid there. Non-finite inputs are replaced by the column
    medians seen during ``fit``. ``k_range`` is clipped to ``[2, n - 1]``.
    """

    def __init__(self, retention: float = 0.99, k_range=DEFAULT_K_RANGE, n_init: int = 10,
                 max_iter: int = 300, random_state: int = 0):
        self.retention = retention
        self.k_range = k_range
        self.n_init = n_init
        self.max_iter = max_iter
        self.random_state = random_state

    def _impute(self, X):
        X = check_table(X)
        return np.where(np.isfinite(X), X, self.medians_)

    def fit(self, X, y=None, feature_names=None):
        names = getattr(X, "names", feature_names)
        X = check_table(X, min_rows=3)
        finite = np.where(np.isfinite(X), X, np.nan)
        med = np.nanmedian(np.where(np.isnan(finite).all(0), 0.0, finite), axis=0)
        self.medians_ = med
        X = self._impute(X)
        self.feature_names_ = list(names) if names is not None else [f"f{i}" for i in range(X.shape[1])]
        self.scaler_ = StandardScaler().fit(X)
        self.pca_ = PCA(self.retention).fit(self.scaler_.transform(X))
        Z = self.pca_.transform(self.scaler_.transform(X))
        ks = [k for k in self.k_range if 2 <= k <= len(X) - 1]
        self.k_, self.kmeans_, self.silhouette_scores_ = select_k(
            Z, ks, n_init=self.n_init, max_iter=self.max_iter, random_state=self.random_state)
        self.labels_ = self.kmeans_.labels_
        return self

    def transform(self, X):
        check_is_fitted(self, "kmeans_")
        return self.pca_.transform(self.scaler_.transform(self._impute(X)))

    def predict(self, X):
        return nearest_centroid(self.transform(X), self.kmeans_.cluster_centers_)

    @property
    def n_clusters_(self) -> int:
        return int(self.k_)

    def to_json(self) -> str:
        check_is_fitted(self, "kmeans_")
        doc = {
            "params": {k: (list(v) if isinstance(v, (range, tuple)) else v) for k, v in self.get_params().items()},
            "feature_names": self.feature_names_,
            "imputation": {"medians": self.medians_.tolist()},
            "scaler": {"means": self.scaler_.mean_.tolist(), "stddevs": self.scaler_.scale_.tolist()},
            "pca": {
                "mean": self.pca_.mean_.tolist(),
                "components": self.pca_.components_.tolist(),
                "explained_variance_ratio": self.pca_.explained_variance_ratio_.tolist(),
                "degenerate": bool(self.pca_.degenerate_),
            },
            "kmeans": {
                "k": int(self.k_),
                "centroids": self.kmeans_.cluster_centers_.tolist(),
                "inertia": self.kmeans_.inertia_,
                "seed": self.random_state,
                "silhouette": {str(k): v for k, v in self.silhouette_scores_.items()},
            },
        }
        return json.dumps(doc, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Stratifier":
        doc = json.loads(text)
        params = dict(doc["params"])
        params["k_range"] = tuple(params["k_range"])
        self = cls(**params)
        self.feature_names_ = doc["feature_names"]
        self.medians_ = np.array(doc["imputation"]["medians"], dtype=float)
        self.scaler_ = StandardScaler()
        self.scaler_.mean_ = np.array(doc["scaler"]["means"], dtype=float)
        self.scaler_.scale_ = np.array(doc["scaler"]["stddevs"], dtype=float)
        self.pca_ = PCA(self.retention)
        self.pca_.mean_ = np.array(doc["pca"]["mean"], dtype=float)
        self.pca_.components_ = np.array(doc["pca"]["components"], dtype=float)
        self.pca_.explained_variance_ratio_ = np.array(doc["pca"]["explained_variance_ratio"], dtype=float)
        self.pca_.n_components_ = len(self.pca_.components_)
        self.pca_.degenerate_ = doc["pca"]["degenerate"]
        km = doc["kmeans"]
        self.k_ = km["k"]
        self.kmeans_ = KMeans(km["k"], self.n_init, self.max_iter, km["seed"])
        self.kmeans_.cluster_centers_ = np.array(km["centroids"], dtype=float)
        self.kmeans_.inertia_ = km["inertia"]
        self.silhouette_scores_ = {int(k): v for k, v in km["silhouette"].items()}
        dims = (len(self.feature_names_), self.pca_.components_.shape[1],
                self.pca_.components_.shape[0], self.kmeans_.cluster_centers_.shape[1])
        if dims[0] != dims[1] or dims[2] != dims[3]:
            raise ValueError(f"inconsistent stratification model dimensions {dims}")
        return self
