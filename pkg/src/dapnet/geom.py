"""Geometric kernels on raw coordinates.

Farthest point sampling, fixed-radius ball query, k-nearest neighbours and
inverse-distance interpolation. Everything here is a pure function of its
inputs and operates on plain ``N x 3`` float arrays.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

IDW_NEIGHBORS = 3


@dataclass(frozen=True)
class GroupIndex:
    centroid_ids: np.ndarray  # (G,)
    member_ids: np.ndarray  # (G, S)
    radius: float
    padded: np.ndarray  # (G,) bool, True where the row was filled by repetition


def _check_coords(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[0] < 1:
        raise ValueError(f"expected a non-empty N x l coordinate array, got {points.shape}")
    if not np.all(np.isfinite(points)):
        raise ValueError("coordinates must be finite")
    return points


def canonical_seed(points: np.ndarray) -> int:
    """Index of the lexicographically smallest (x, y, z) point, lowest index on ties."""
    points = _check_coords(points)
    keys = tuple(points[:, d] for d in reversed(range(points.shape[1])))
    return int(np.lexsort(keys)[0])


def fps(points: np.ndarray, k: int, seed: int | None = None) -> np.ndarray:
    """Greedy max-min farthest point sampling.

    The first pick is ``seed`` (default :func:`canonical_seed`); each next
    pick maximizes the L2 distance to the already chosen set, ties going to
    the lowest index.
    """
    points = _check_coords(points)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"fps: need 1 <= k <= N, got k={k}, N={n}")
    if seed is None:
        seed = canonical_seed(points)
    if not 0 <= seed < n:
        raise ValueError(f"fps: seed {seed} out of range for N={n}")
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = seed
    mind = np.sum((points - points[seed]) ** 2, axis=1)
    mind[seed] = -1.0
    for i in range(1, k):
        nxt = int(np.argmax(mind))
        chosen[i] = nxt
        d = np.sum((points - points[nxt]) ** 2, axis=1)
        np.minimum(mind, d, out=mind)
        mind[chosen[: i + 1]] = -1.0
    return chosen


def pairwise_sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def ball_query(points: np.ndarray, centroids, radius: float, s: int) -> GroupIndex:
    """Up to ``s`` in-radius members per centroid, in ascending index order.

    Groups with fewer than ``s`` members are padded by repeating their first
    member; the centroid itself always qualifies so no group is empty.
    """
    points = _check_coords(points)
    if radius <= 0 or s < 1:
        raise ValueError(f"ball_query: need radius > 0 and s >= 1, got {radius}, {s}")
    centroids = np.asarray(centroids, dtype=np.int64)
    n = points.shape[0]
    d2 = pairwise_sqdist(points[centroids], points)
    inside = d2 <= radius * radius
    inside[np.arange(len(centroids)), centroids] = True
    cand = np.where(inside, np.arange(n), n)
    if s < n:
        cand = np.partition(cand, s - 1, axis=1)[:, :s]
    cand = np.sort(cand, axis=1)
    if cand.shape[1] < s:
        cand = np.concatenate([cand, np.full((len(centroids), s - cand.shape[1]), n)], axis=1)
    padded = cand[:, -1] == n
    first = np.repeat(cand[:, :1], s, axis=1)
    members = np.where(cand == n, first, cand)
    return GroupIndex(centroids.copy(), members, float(radius), padded)


def knn(sources: np.ndarray, queries: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The ``k`` nearest sources of each query as ``(indices, squared distances)``.

    Neighbours are ordered by distance, ties by source index.
    """
    sources, queries = _check_coords(sources), _check_coords(queries)
    if not 1 <= k <= sources.shape[0]:
        raise ValueError(f"knn: need 1 <= k <= {sources.shape[0]}, got {k}")
    d2 = pairwise_sqdist(queries, sources)
    idx = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return idx, np.take_along_axis(d2, idx, axis=1)


def idw_weights(sources: np.ndarray, queries: np.ndarray, k: int = IDW_NEIGHBORS):
    """Neighbour indices and normalized inverse-square-distance weights.

    A query that coincides with a source gets weight 1 on that source (the
    first coincident one by neighbour order) and 0 elsewhere.
    """
    idx, d2 = knn(sources, queries, k)
    exact = d2 == 0.0
    hit = exact.any(axis=1)
    with np.errstate(divide="ignore"):
        w = np.where(exact, 0.0, 1.0 / np.where(exact, 1.0, d2))
    w = w / w.sum(axis=1, keepdims=True).clip(min=np.finfo(float).tiny)
    if hit.any():
        first = np.argmax(exact[hit], axis=1)
        w[hit] = 0.0
        w[np.flatnonzero(hit), first] = 1.0
    return idx, w


def idw_interpolate(
    sources: np.ndarray, features: np.ndarray, queries: np.ndarray, k: int = IDW_NEIGHBORS
) -> np.ndarray:
    """Interpolate ``features`` (one row per source) at ``queries``."""
    features = np.asarray(features, dtype=np.float64)
    idx, w = idw_weights(sources, queries, k)
    return np.einsum("qk,qkc->qc", w, features[idx])


class UniformGrid:
    """Bucket points into cubic cells to speed up radius searches.

    The naive search in :func:`ball_query` stays the reference; this index
    returns identical members.
    """

    def __init__(self, points: np.ndarray, cell: float):
        self.points = _check_coords(points)
        if cell <= 0:
            raise ValueError("cell size must be positive")
        self.cell = float(cell)
        self.origin = self.points.min(axis=0)
        keys = np.floor((self.points - self.origin) / self.cell).astype(np.int64)
        self.buckets: dict = {}
        for i, key in enumerate(map(tuple, keys)):
            self.buckets.setdefault(key, []).append(i)

    def within(self, center: np.ndarray, radius: float) -> np.ndarray:
        lo = np.floor((center - radius - self.origin) / self.cell).astype(np.int64)
        hi = np.floor((center + radius - self.origin) / self.cell).astype(np.int64)
        found = []
        for key in np.ndindex(*(hi - lo + 1)):
            found.extend(self.buckets.get(tuple(lo + np.array(key)), ()))
        if not found:
            return np.empty(0, dtype=np.int64)
        found = np.array(sorted(found))
        d2 = np.sum((self.points[found] - center) ** 2, axis=1)
        return found[d2 <= radius * radius]

    def ball_query(self, centroids, radius: float, s: int) -> GroupIndex:
        centroids = np.asarray(centroids, dtype=np.int64)
        rows, padded = [], []
        for c in centroids:
            hits = self.within(self.points[c], radius)
            if c not in hits:
                hits = np.sort(np.append(hits, c))
            row = hits[:s]
            padded.append(len(row) < s)
            rows.append(np.concatenate([row, np.full(s - len(row), row[0])]))
        return GroupIndex(centroids.copy(), np.array(rows, dtype=np.int64), float(radius),
                          np.array(padded))
