"""Exact k-nearest-neighbour search and per-point relative features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .cloud import LabeledCloud
from .errors import ValidationError

RELATIVE = "relative"
RELATIVE_ABSOLUTE = "relative+absolute"
FEATURE_MODES = (RELATIVE, RELATIVE_ABSOLUTE)
PER_NEIGHBOR = 5  # dx, dy, dz, d_reflectance, d_range
ABSOLUTE = 4  # x, y, z, range

_BRUTE_FORCE_MAX_N = 64


def feature_dim(k: int, mode: str) -> int:
    if mode not in FEATURE_MODES:
        raise ValidationError(f"unknown feature mode {mode!r}; choose from {FEATURE_MODES}")
    return k * PER_NEIGHBOR + (ABSOLUTE if mode == RELATIVE_ABSOLUTE else 0)


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    rows: np.ndarray
    feature_mode: str
    k: int

    def __post_init__(self):
        if self.rows.ndim != 2 or self.rows.shape[1] != feature_dim(self.k, self.feature_mode):
            raise ValidationError(f"feature rows of shape {self.rows.shape} do not match k={self.k}, "
                                  f"mode={self.feature_mode}")

    @property
    def D(self) -> int:
        return self.rows.shape[1]

    def __len__(self) -> int:
        return self.rows.shape[0]


def _sorted_rows(d2: np.ndarray, idx: np.ndarray, k: int) -> np.ndarray:
    """Order candidates by (squared distance, index) and keep k per row."""
    if d2.ndim == 1:
        return idx[np.lexsort((idx, d2))][:k]
    # row-wise lexsort: sort by index first, then stable sort by distance
    o1 = np.argsort(idx, axis=1, kind="stable")
    idx, d2 = np.take_along_axis(idx, o1, 1), np.take_along_axis(d2, o1, 1)
    o2 = np.argsort(d2, axis=1, kind="stable")
    return np.take_along_axis(idx, o2, 1)[:, :k]


def _pad(rows: np.ndarray, k: int) -> np.ndarray:
    if rows.shape[1] >= k:
        return rows[:, :k]
    if rows.shape[1] == 0:
        raise AssertionError("padding needs at least one neighbour")
    fill = np.repeat(rows[:, -1:], k - rows.shape[1], axis=1)
    return np.concatenate([rows, fill], axis=1)


def knn_brute_force(points: np.ndarray, k: int, query: np.ndarray | None = None) -> np.ndarray:
    """O(N^2) reference search with the same ordering rules as :func:`knn`."""
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    q = np.arange(n) if query is None else np.asarray(query, dtype=np.int64)
    if n == 1:
        return np.zeros((q.shape[0], k), dtype=np.int64)
    out = np.empty((q.shape[0], min(k, n - 1)), dtype=np.int64)
    all_idx = np.arange(n)
    for r, i in enumerate(q):
        d2 = ((points - points[i]) ** 2).sum(axis=1)
        others = all_idx != i
        out[r] = _sorted_rows(d2[others], all_idx[others], k)
    return _pad(out, k)


def knn(cloud: LabeledCloud | np.ndarray, k: int, query: np.ndarray | None = None) -> np.ndarray:
    """Indices of the k nearest other points of each (query) point.

    Rows are sorted by ascending Euclidean distance with ties broken by lower
    point index. The point itself is excluded; when fewer than k other points
    exist the farthest one is repeated, and a single-point cloud pads with
    its own index.
    """
    points = cloud.points if isinstance(cloud, LabeledCloud) else np.asarray(cloud, dtype=np.float64)
    n = points.shape[0]
    if n < 1 or k < 1:
        raise ValidationError("knn needs at least one point and k >= 1")
    q = np.arange(n) if query is None else np.asarray(query, dtype=np.int64)
    if n <= _BRUTE_FORCE_MAX_N or n - 1 <= k + 1:
        return knn_brute_force(points, k, q)

    m = k + 2  # room for self (or a duplicate of it) plus one extra to detect boundary ties
    tree = cKDTree(points)
    _, cand = tree.query(points[q], k=m)
    cand = cand.astype(np.int64)
    d2 = ((points[cand] - points[q][:, None, :]) ** 2).sum(axis=2)
    is_self = cand == q[:, None]
    d2 = np.where(is_self, np.inf, d2)
    rows = _sorted_rows(d2, cand, m)
    d2_sorted = np.take_along_axis(d2, np.argsort(d2, axis=1, kind="stable"), 1)

    out = rows[:, :k].copy()
    # the tree's own rounding can order near-equal distances differently, and
    # equal distances may continue past the fetched candidates
    kth = d2_sorted[:, k - 1]
    last = np.max(np.where(np.isfinite(d2_sorted), d2_sorted, -np.inf), axis=1)
    unsure = np.flatnonzero(~(last > kth * (1 + 1e-9) + 1e-300) | ~is_self.any(axis=1))
    if unsure.size:
        radii = np.sqrt(kth[unsure]) * (1 + 1e-6) + 1e-12
        balls = tree.query_ball_point(points[q[unsure]], radii)
        for row, ball in zip(unsure, balls):
            ball = np.asarray(ball, dtype=np.int64)
            ball = ball[ball != q[row]]
            if ball.size < k:
                out[row] = knn_brute_force(points, k, q[row:row + 1])[0]
                continue
            bd2 = ((points[ball] - points[q[row]]) ** 2).sum(axis=1)
            out[row] = ball[np.lexsort((ball, bd2))[:k]]
    return out


def relative_features(cloud: LabeledCloud, neighbors: np.ndarray, mode: str = RELATIVE,
                      query: np.ndarray | None = None) -> FeatureMatrix:
    """Per-neighbour differences ``(dx, dy, dz, d_refl, d_range)`` concatenated in
    neighbour order; ``relative+absolute`` appends ``(x, y, z, range)``.

    ``query`` selects the rows (default: every point) and must match the
    rows of ``neighbors``.
    """
    neighbors = np.asarray(neighbors, dtype=np.int64)
    q = np.arange(cloud.n) if query is None else np.asarray(query, dtype=np.int64)
    if neighbors.ndim != 2 or neighbors.shape[0] != q.shape[0]:
        raise ValidationError(f"neighbour matrix of shape {neighbors.shape} does not match {q.shape[0]} rows")
    k = neighbors.shape[1]
    dim = feature_dim(k, mode)
    if q.shape[0] == 0:
        return FeatureMatrix(np.zeros((0, dim)), mode, k)
    if neighbors.size and (neighbors.min() < 0 or neighbors.max() >= cloud.n):
        raise ValidationError("neighbour index out of range")

    p = cloud.points
    rng_ = np.linalg.norm(p, axis=1)
    own = np.concatenate([p, cloud.reflectance[:, None], rng_[:, None]], axis=1)  # N x 5
    diff = own[neighbors] - own[q][:, None, :]
    rows = diff.reshape(q.shape[0], k * PER_NEIGHBOR)
    if mode == RELATIVE_ABSOLUTE:
        rows = np.concatenate([rows, p[q], rng_[q, None]], axis=1)
    return FeatureMatrix(np.ascontiguousarray(rows), mode, k)


def extract(cloud: LabeledCloud, k: int, mode: str, query: np.ndarray | None = None) -> FeatureMatrix:
    """knn followed by :func:`relative_features`."""
    if cloud.n == 0:
        return FeatureMatrix(np.zeros((0, feature_dim(k, mode))), mode, k)
    nb = knn(cloud, k, query)
    return relative_features(cloud, nb, mode, query)
