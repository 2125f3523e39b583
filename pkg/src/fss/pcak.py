"""PCA (three components) + k-means baseline sorter."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from .tensor import RngStream
from .train import MetricsReport


@dataclass
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # rows, descending variance
    explained_variance: np.ndarray


def pca_fit(windows, n_components=3, rank_tol=1e-10):
    """Top principal axes of the sample covariance.

    Directions whose variance is negligible relative to the largest are
    dropped with a warning, so rank-deficient data yields fewer components.
    """
    X = np.asarray(windows, dtype=np.float64)
    if X.ndim != 2 or len(X) < 4:
        raise ValueError("pca_fit needs at least 4 windows")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1][:n_components]
    evals, evecs = evals[order], evecs[:, order]
    keep = evals > rank_tol * max(evals[0], np.finfo(float).tiny)
    if not keep.all():
        warnings.warn(
            f"data has rank {int(keep.sum())} < {n_components}; returning fewer components",
            RuntimeWarning,
            stacklevel=2,
        )
    comps = evecs[:, keep].T
    # sign convention: largest-magnitude loading positive
    signs = np.sign(comps[np.arange(len(comps)), np.abs(comps).argmax(axis=1)])
    return PcaModel(mean, comps * signs[:, None], evals[keep])


def pca_project(model, windows):
    return (np.asarray(windows, dtype=np.float64) - model.mean) @ model.components.T


class KMeansResult(NamedTuple):
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    history: list  # inertia after each Lloyd iteration of the winning restart


def _plus_plus(points, k, rng):
    centroids = [points[rng.integers(0, len(points))]]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            idx = rng.integers(0, len(points))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total))
            idx = min(idx, len(points) - 1)
        centroids.append(points[idx])
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return np.array(centroids)


def _lloyd(points, centroids, max_iter, tol):
    history = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(points)), labels].sum()))
        new = centroids.copy()
        for j in range(len(centroids)):
            members = points[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
            else:
                # empty cluster: move it onto the worst-fitted point
                far = int(d2[np.arange(len(points)), labels].argmax())
                new[j] = points[far]
        shift = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if shift < tol:
            break
    d2 = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = d2.argmin(axis=1)
    inertia = float(d2[np.arange(len(points)), labels].sum())
    history.append(inertia)
    return labels, centroids, inertia, history


def kmeans(points, k, restarts=10, rng=None, max_iter=300, tol=1e-8):
    """Lloyd's algorithm from k-means++ seeds; keeps the lowest-inertia restart.

    Restart ``i`` draws from ``rng.spawn(i)``, so adding restarts never makes
    the returned inertia worse.
    """
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k or k < 1:
        raise ValueError(f"kmeans needs 1 <= k <= number of points, got k={k}, M={len(points)}")
    rng = rng or RngStream(0)
    best = None
    for r in range(restarts):
        sub = rng.spawn(r)
        labels, cents, inertia, hist = _lloyd(points, _plus_plus(points, k, sub), max_iter, tol)
        if best is None or inertia < best.inertia:
            best = KMeansResult(labels, cents, inertia, hist)
    return best


def match_clusters(true_labels, cluster_labels, n_classes):
    """Cluster -> class map maximizing agreement with ``true_labels``."""
    k = int(cluster_labels.max()) + 1 if len(cluster_labels) else 0
    table = np.zeros((max(k, n_classes), n_classes), dtype=np.int64)
    np.add.at(table, (cluster_labels, true_labels), 1)
    rows, cols = linear_sum_assignment(-table)
    mapping = np.zeros(len(table), dtype=np.int64)
    mapping[rows] = cols
    return mapping


def pcak_sort(dataset, seed=0, n_components=3, restarts=10):
    """Unsupervised sort of ``dataset`` scored against its labels."""
    model = pca_fit(dataset.windows, n_components)
    scores = pca_project(model, dataset.windows)
    km = kmeans(scores, dataset.n_classes, restarts, RngStream(seed))
    mapping = match_clusters(dataset.labels, km.labels, dataset.n_classes)
    pred = mapping[km.labels]
    conf = np.zeros((dataset.n_classes, dataset.n_classes), dtype=np.int64)
    np.add.at(conf, (dataset.labels, pred), 1)
    return MetricsReport.from_confusion(
        conf, n_tasks=len(dataset), seed=seed, extra={"method": "pca-k", "components": len(model.components)}
    )
