"""Seeded k-means shared by the data-selection and context modules.

k-means++ initialization, Lloyd iterations, deterministic tie-breaking
(lowest index wins everywhere). Empty clusters are repaired by stealing
the point currently farthest from its assigned centroid, so every
returned cluster is non-empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, InfeasibleError, ValidationError

DEFAULT_TOL = 1e-6
DEFAULT_MAX_ITER = 300


@dataclass
class ClusteringResult:
    k: int
    assignments: np.ndarray  # (n,) int64 cluster ids
    centroids: np.ndarray    # (k, d) float64
    inertia: float           # sum of squared point-to-centroid distances
    iterations_run: int


def _sq_dists(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """(n, k) squared Euclidean distances, clipped at zero."""
    pp = (points * points).sum(axis=1)[:, None]
    cc = (centroids * centroids).sum(axis=1)[None, :]
    d2 = pp + cc - 2.0 * points @ centroids.T
    return np.maximum(d2, 0.0)


def _plusplus_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding: D^2-weighted draws from the data points."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=np.float64)
    first = int(rng.integers(n))
    centroids[0] = points[first]
    closest = _sq_dists(points, centroids[:1])[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining points coincide with chosen centers
            idx = int(rng.integers(n))
        else:
            idx = int(rng.choice(n, p=closest / total))
        centroids[j] = points[idx]
        closest = np.minimum(closest, _sq_dists(points, centroids[j : j + 1])[:, 0])
    return centroids


def _repair_empty(points, assignments, centroids, k):
    """Give every empty cluster the point farthest from its current centroid.

    Mutates assignments/centroids in place; returns True when a repair
    happened. Ties broken by lowest point index.
    """
    counts = np.bincount(assignments, minlength=k)
    empties = np.flatnonzero(counts == 0)
    if empties.size == 0:
        return False
    for cluster in empties:
        dists = np.linalg.norm(points - centroids[assignments], axis=1)
        # never steal a point that is alone in its cluster
        singleton = counts[assignments] <= 1
        dists = np.where(singleton, -1.0, dists)
        victim = int(np.argmax(dists))
        counts[assignments[victim]] -= 1
        counts[cluster] += 1
        assignments[victim] = cluster
        centroids[cluster] = points[victim]
    return True


def kmeans(
    points,
    k: int,
    seed,
    max_iter: int = DEFAULT_MAX_ITER,
    tol: float = DEFAULT_TOL,
) -> ClusteringResult:
    """Cluster points into k groups, deterministically for fixed inputs.

    Iterates until the assignment is a fixed point of the centroids (and
    the centroid shift has dropped below tol), so the returned centroids
    are exactly the member means and re-assigning against them reproduces
    the returned assignments.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValidationError(f"points must be 2-D, got ndim={points.ndim}")
    if not np.all(np.isfinite(points)):
        raise DataError("points contain non-finite values")
    n = points.shape[0]
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if n < k:
        raise InfeasibleError(f"cannot form {k} clusters from {n} points")

    rng = np.random.default_rng(seed)
    centroids = _plusplus_init(points, k, rng)
    assignments = np.argmin(_sq_dists(points, centroids), axis=1)
    _repair_empty(points, assignments, centroids, k)

    iterations = 0
    for _ in range(max_iter):
        iterations += 1
        new_centroids = np.empty_like(centroids)
        for j in range(k):
            new_centroids[j] = points[assignments == j].mean(axis=0)
        shift = float(np.linalg.norm(new_centroids - centroids, axis=1).max())
        centroids = new_centroids
        new_assignments = np.argmin(_sq_dists(points, centroids), axis=1)
        repaired = _repair_empty(points, new_assignments, centroids, k)
        changed = bool(np.any(new_assignments != assignments)) or repaired
        assignments = new_assignments
        if not changed and shift < tol:
            break

    inertia = float(((points - centroids[assignments]) ** 2).sum())
    return ClusteringResult(
        k=k,
        assignments=assignments.astype(np.int64),
        centroids=centroids,
        inertia=inertia,
        iterations_run=iterations,
    )


def nearest_to_centroid(result: ClusteringResult, points) -> np.ndarray:
    """Per cluster, the index of the member closest to its centroid.

    Euclidean distance; exact ties go to the smallest point index.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] != result.assignments.shape[0]:
        raise ValidationError(
            f"result describes {result.assignments.shape[0]} points, got {points.shape[0]}"
        )
    picks = np.empty(result.k, dtype=np.int64)
    for j in range(result.k):
        members = np.flatnonzero(result.assignments == j)
        if members.size == 0:
            raise ValidationError(f"cluster {j} is empty")
        dists = np.linalg.norm(points[members] - result.centroids[j], axis=1)
        picks[j] = members[int(np.argmin(dists))]
    return picks
