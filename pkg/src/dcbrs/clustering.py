"""K-means (k-means++ seeded Lloyd) and the oracle sub-label clusterer."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import Instance


@dataclass
class Clustering:
    """Result of clustering one class's in-memory instances.

    ``assignments[i]`` is the cluster of the i-th clustered point (callers keep
    the point -> slot mapping). ``history`` holds the inertia measured after
    every assignment step, for monotonicity checks.
    """

    centroids: np.ndarray
    assignments: np.ndarray
    sizes: np.ndarray
    inertia: float
    n_iter: int = 0
    history: list[float] = field(default_factory=list)
    keys: Optional[list[int]] = None  # oracle mode: sub_label of each cluster

    @property
    def k(self) -> int:
        return len(self.centroids)


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # ||x||^2 - 2 x.c + ||c||^2, clipped: cancellation can go slightly negative.
    d = (np.einsum("ij,ij->i", points, points)[:, None]
         - 2.0 * points @ centroids.T
         + np.einsum("ij,ij->i", centroids, centroids)[None, :])
    np.maximum(d, 0.0, out=d)
    return d


def _means(x: np.ndarray, labels: np.ndarray, k: int, sizes: np.ndarray) -> np.ndarray:
    onehot = (labels[None, :] == np.arange(k)[:, None]).astype(np.float64)
    return (onehot @ x) / np.maximum(sizes, 1)[:, None]


def _kmeanspp(points: np.ndarray, k: int, rng: np.random.Generator,
              n_trials: int = 1) -> np.ndarray:
    """k-means++ seeding; with ``n_trials > 1`` each step keeps the best of
    several D^2-sampled candidates (greedy k-means++)."""
    n = len(points)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(points, points[centers[0]][None, :])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # Fewer distinct points than k: no further center can add spread.
            break
        r = rng.random(n_trials) * total
        cand = np.minimum(np.searchsorted(np.cumsum(closest), r, side="right"), n - 1)
        d = np.minimum(closest[:, None], _sq_dists(points, points[cand]))
        best = int(d.sum(axis=0).argmin())
        centers.append(int(cand[best]))
        closest = d[:, best].copy()
    return points[centers].copy()


def _lloyd(x: np.ndarray, centroids: np.ndarray, max_iters: int, tol: float) -> Clustering:
    k = len(centroids)
    history: list[float] = []
    labels = None
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d = _sq_dists(x, centroids)
        new_labels = d.argmin(axis=1)
        inertia = float(d[np.arange(len(x)), new_labels].sum())
        history.append(inertia)
        if labels is not None and np.array_equal(new_labels, labels):
            break
        if len(history) > 1:
            prev = history[-2]
            if prev == 0.0 or (prev - inertia) / prev < tol:
                break
        labels = new_labels
        sizes = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(sizes == 0):
            # Empty-cluster repair: take the point farthest from the old centroid.
            labels[int(d[:, j].argmax())] = j
            sizes = np.bincount(labels, minlength=k)
        centroids = _means(x, labels, k, sizes)

    d = _sq_dists(x, centroids)
    labels = d.argmin(axis=1)
    inertia = float(d[np.arange(len(x)), labels].sum())
    return Clustering(centroids=centroids, assignments=labels,
                      sizes=np.bincount(labels, minlength=k), inertia=inertia,
                      n_iter=n_iter, history=history)


def kmeans_fit(points, k: int, rng: np.random.Generator, max_iters: int = 50,
               tol: float = 1e-4, n_init: int = 10, n_trials: int = 1) -> Clustering:
    """Cluster ``points`` into at most ``k`` groups.

    k is clamped to the number of points, and further to the number of
    distinct points reachable by k-means++ (identical points form one cluster).
    Each of the ``n_init`` restarts seeds with k-means++ and runs Lloyd until
    an assignment fixpoint, a relative inertia improvement below ``tol``, or
    ``max_iters`` rounds; the lowest-inertia restart wins (first on ties).
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise ValueError("kmeans_fit needs at least one point")
    if k < 1 or n_init < 1 or n_trials < 1:
        raise ValueError("k, n_init and n_trials must be >= 1")
    k = min(k, len(x))
    best = None
    for _ in range(n_init):
        fit = _lloyd(x, _kmeanspp(x, k, rng, n_trials), max_iters, tol)
        if best is None or fit.inertia < best.inertia:
            best = fit
    return best


def assign(point, clustering: Clustering) -> int:
    """Nearest centroid by squared Euclidean distance, lowest id on ties."""
    p = np.asarray(point, dtype=np.float64).reshape(-1)
    if p.shape[0] != clustering.centroids.shape[1]:
        raise ValueError(f"point has dimension {p.shape[0]}, "
                         f"centroids have {clustering.centroids.shape[1]}")
    d = ((clustering.centroids - p) ** 2).sum(axis=1)
    return int(d.argmin())


def largest_cluster(clustering: Clustering, rng: np.random.Generator) -> int:
    sizes = clustering.sizes
    top = np.flatnonzero(sizes == sizes.max())
    if len(top) == 1:
        return int(top[0])
    return int(top[rng.integers(len(top))])


def oracle_cluster(instances: Sequence[Instance]) -> Clustering:
    """One cluster per distinct sub_label, in ascending sub_label order."""
    if not instances:
        raise ValueError("oracle_cluster needs at least one instance")
    subs = [inst.sub_label for inst in instances]
    if any(s is None for s in subs):
        raise ValueError("oracle clustering requires every instance to carry sub_label")
    keys = sorted(set(subs))
    pos = {s: j for j, s in enumerate(keys)}
    labels = np.fromiter((pos[s] for s in subs), dtype=np.int64, count=len(subs))
    x = np.stack([np.asarray(inst.features, dtype=np.float64) for inst in instances])
    sizes = np.bincount(labels, minlength=len(keys))
    centroids = _means(x, labels, len(keys), sizes)
    inertia = float(((x - centroids[labels]) ** 2).sum())
    return Clustering(centroids=centroids, assignments=labels, sizes=sizes,
                      inertia=inertia, keys=keys)
