"""Latent-domain pseudo labels: domain-class targets and centroid clustering.

One refresh takes bottleneck features ``f`` and the softmax output ``delta``
of the latent-domain classifier and runs

1. soft centroids ``mu~_k = sum_i delta_ik f_i / sum_i delta_ik``,
2. provisional labels by nearest soft centroid,
3. hard-mean centroids of the provisional clusters and a final
   nearest-centroid re-assignment.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

log = logging.getLogger(__name__)

METRICS = ("cosine", "euclidean")
DEGENERATE_MASS = 1e-12


def domain_class_label(d, y, n_classes: int, n_domains: int | None = None):
    """Joint target ``s = d * C + y``; works on ints or integer arrays."""
    d_arr, y_arr = np.asarray(d), np.asarray(y)
    if np.any(y_arr < 0) or np.any(y_arr >= n_classes):
        raise DataError(f"class label outside [0, {n_classes})")
    if np.any(d_arr < 0) or (n_domains is not None and np.any(d_arr >= n_domains)):
        raise DataError(f"domain label outside [0, {n_domains})")
    s = d_arr * n_classes + y_arr
    return int(s) if s.ndim == 0 else s.astype(np.int64)


def split_domain_class(s, n_classes: int):
    """Inverse of :func:`domain_class_label`: ``(d, y)``."""
    s = np.asarray(s)
    d, y = np.divmod(s, n_classes)
    return (int(d), int(y)) if s.ndim == 0 else (d, y)


def _check(features: np.ndarray, centroids: np.ndarray, metric: str):
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}; choose from {METRICS}")
    features = np.asarray(features, dtype=np.float64)
    centroids = np.asarray(centroids, dtype=np.float64)
    if centroids.ndim != 2 or len(centroids) < 1:
        raise ShapeError("need at least one centroid")
    if features.ndim != 2 or features.shape[1] != centroids.shape[1]:
        raise ShapeError(f"feature dim {features.shape} does not match centroids {centroids.shape}")
    return features, centroids


def distances(features: np.ndarray, centroids: np.ndarray, metric: str = "cosine") -> np.ndarray:
    """(N, K) distance matrix.

    Cosine distance is ``1 - cos``; a zero-norm centroid is at distance 1.
    Rows whose feature vector is all zeros use euclidean distance instead.
    """
    features, centroids = _check(features, centroids, metric)
    diff = features[:, None, :] - centroids[None, :, :]
    eucl = np.sqrt((diff * diff).sum(axis=-1))
    if metric == "euclidean":
        return eucl
    fn = np.linalg.norm(features, axis=1)
    cn = np.linalg.norm(centroids, axis=1)
    denom = fn[:, None] * cn[None, :]
    cos = np.divide(features @ centroids.T, denom, out=np.zeros_like(denom), where=denom > 0)
    dist = 1.0 - cos
    zero = fn == 0
    dist[zero] = eucl[zero]
    return dist


def nearest_centroid_assign(features, centroids, metric: str = "cosine") -> np.ndarray:
    """Index of the nearest centroid per row; ties go to the smallest index."""
    return distances(features, centroids, metric).argmin(axis=1)


def soft_centroids(features, weights) -> np.ndarray:
    """Softmax-weighted feature means, one per latent domain.

    A domain whose total weight is below 1e-12 takes the feature of the
    sample that gives it the most weight.
    """
    features = np.asarray(features, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape[0] != features.shape[0] or weights.ndim != 2:
        raise ShapeError(f"weights {weights.shape} do not match features {features.shape}")
    mass = weights.sum(axis=0)
    cents = weights.T @ features
    out = np.empty_like(cents)
    for k in range(weights.shape[1]):
        if mass[k] < DEGENERATE_MASS:
            out[k] = features[int(weights[:, k].argmax())]
        else:
            out[k] = cents[k] / mass[k]
    return out


@dataclass
class RefineResult:
    centroids: np.ndarray
    labels: np.ndarray
    n_changed: int
    reseeded: list[int] = field(default_factory=list)


def hard_centroids(features, labels, k: int, metric: str = "cosine"):
    """Cluster means; empty clusters are re-seeded at the feature farthest
    from its nearest non-empty centroid. Returns (centroids, reseeded)."""
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if len(labels) and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"cluster index outside [0, {k})")
    counts = np.bincount(labels, minlength=k)
    cents = np.zeros((k, features.shape[1]))
    np.add.at(cents, labels, features)
    filled = counts > 0
    cents[filled] /= counts[filled, None]
    reseeded = []
    for j in np.flatnonzero(~filled):
        live = np.flatnonzero(filled)
        if len(live) == 0:
            cents[j] = features[0]
        else:
            nearest = distances(features, cents[live], metric).min(axis=1)
            cents[j] = features[int(nearest.argmax())]
        filled[j] = True
        reseeded.append(int(j))
    if reseeded:
        log.info("re-seeded empty clusters %s", reseeded)
    return cents, reseeded


def refine_pseudo_labels(features, provisional, k: int, metric: str = "cosine") -> RefineResult:
    """One pass: hard-mean centroids of ``provisional`` then nearest-centroid labels."""
    provisional = np.asarray(provisional)
    cents, reseeded = hard_centroids(features, provisional, k, metric)
    labels = nearest_centroid_assign(features, cents, metric)
    return RefineResult(cents, labels, int((labels != provisional).sum()), reseeded)


def assignment_cost(features, centroids, labels, metric: str = "cosine") -> float:
    """Total distance of each feature to its assigned centroid.

    Euclidean uses squared distance, the objective the mean minimises; cosine
    uses ``1 - cos``, which the mean minimises for unit-norm features.
    """
    d = distances(features, centroids, metric)
    if metric == "euclidean":
        d = d * d
    return float(d[np.arange(len(d)), np.asarray(labels)].sum())


def refresh_pseudo_labels(features, weights, metric: str = "cosine") -> tuple[np.ndarray, np.ndarray, np.ndarray, RefineResult]:
    """Full refresh; returns (soft centroids, provisional labels, refined labels, result)."""
    soft = soft_centroids(features, weights)
    provisional = nearest_centroid_assign(features, soft, metric)
    result = refine_pseudo_labels(features, provisional, weights.shape[1], metric)
    return soft, provisional, result.labels, result
