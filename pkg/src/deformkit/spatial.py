"""Deterministic spatial queries over point sets.

Farthest point sampling, k-nearest-neighbor, and fixed-radius grouping,
all backed by a uniform grid hash.  Every tie is broken by lowest point
index so results are exactly reproducible and checkable against a
brute-force scan.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np


class KTooLargeError(ValueError):
    """Requested more neighbors / samples than there are source points."""


@dataclass
class NeighborSet:
    """Per-query ordered index lists into the source point set.

    For kNN queries each list is sorted by ascending distance (ties by
    lowest index).  For radius queries lists are sorted by index and may
    be empty.
    """

    groups: list[np.ndarray]
    k: Optional[int] = None
    radius: Optional[float] = None


class GridIndex:
    """Uniform grid hash over a fixed (n, 3) point array.

    Cell coordinate of a point is floor(coordinate / cell_size) per axis.
    Immutable after construction; concurrent queries are safe.
    """

    def __init__(self, points: np.ndarray, cell_size: float):
        points = np.ascontiguousarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(f"points must be (n, 3), got {points.shape}")
        if not cell_size > 0.0:
            raise ValueError("cell_size must be positive")
        self.points = points
        self.cell_size = float(cell_size)
        coords = np.floor(points / self.cell_size).astype(np.int64).tolist()
        cells: dict[tuple[int, int, int], list[int]] = {}
        for i, key in enumerate(coords):
            cells.setdefault(tuple(key), []).append(i)
        self.cells = {key: np.asarray(idx, dtype=np.int64) for key, idx in cells.items()}

    @classmethod
    def for_radius(cls, points: np.ndarray, radius: float) -> "GridIndex":
        """Grid sized so a radius query touches at most one ring of cells."""
        return cls(points, radius)

    @classmethod
    def for_knn(cls, points: np.ndarray) -> "GridIndex":
        """Grid sized to cloud_extent / cbrt(n); degenerate clouds get 1 m."""
        points = np.asarray(points, dtype=np.float64)
        extent = float(np.max(points.max(axis=0) - points.min(axis=0)))
        n = points.shape[0]
        cell = extent / max(1.0, n ** (1.0 / 3.0))
        return cls(points, cell if cell > 0.0 else 1.0)

    def _cell_of(self, q: np.ndarray) -> tuple[int, int, int]:
        return tuple(np.floor(q / self.cell_size).astype(np.int64))

    def _ring_indices(self, base: tuple[int, int, int], ring: int) -> list[np.ndarray]:
        """Index arrays of all cells at Chebyshev distance exactly `ring`."""
        bx, by, bz = base
        found = []
        if ring == 0:
            hit = self.cells.get(base)
            return [hit] if hit is not None else []
        span = range(-ring, ring + 1)
        for dx, dy, dz in itertools.product(span, span, span):
            if max(abs(dx), abs(dy), abs(dz)) != ring:
                continue
            hit = self.cells.get((bx + dx, by + dy, bz + dz))
            if hit is not None:
                found.append(hit)
        return found


def farthest_point_sampling(
    points: np.ndarray,
    k: int,
    seed: int = 0,
    start_index: Optional[int] = None,
) -> np.ndarray:
    """Greedy max-min subset selection of k point indices.

    The first index is drawn uniformly from the seeded RNG (or forced via
    start_index); every later pick maximizes the minimum distance to the
    already-selected set, ties broken by lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= k <= n:
        raise KTooLargeError(f"k={k} outside [1, {n}]")
    if start_index is None:
        start_index = int(np.random.default_rng(seed).integers(n))
    chosen = np.empty(k, dtype=np.int64)
    chosen[0] = start_index
    # Incremental min-distance to the selected prefix; argmax picks the
    # first (= lowest-index) maximizer.
    min_d2 = np.sum((points - points[start_index]) ** 2, axis=1)
    for t in range(1, k):
        nxt = int(np.argmax(min_d2))
        chosen[t] = nxt
        np.minimum(min_d2, np.sum((points - points[nxt]) ** 2, axis=1), out=min_d2)
    return chosen


def knn_query(index: GridIndex, queries: np.ndarray, k: int) -> NeighborSet:
    """k nearest source points per query, ascending distance, index ties low.

    Expands grid rings until the k-th best distance is provably covered:
    after scanning rings 0..r every point within r * cell_size has been
    seen, so the search stops once kth_dist <= r * cell_size.
    """
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    n = index.points.shape[0]
    if not 1 <= k <= n:
        raise KTooLargeError(f"k={k} outside [1, {n}]")
    groups = []
    for q in queries:
        base = index._cell_of(q)
        cand: list[np.ndarray] = []
        n_seen = 0
        ring = 0
        best_kth = np.inf
        while True:
            hits = index._ring_indices(base, ring)
            for h in hits:
                cand.append(h)
                n_seen += h.shape[0]
            if n_seen >= k:
                idx = np.concatenate(cand)
                d = np.sqrt(np.sum((index.points[idx] - q) ** 2, axis=1))
                order = np.lexsort((idx, d))
                idx, d = idx[order], d[order]
                best_kth = d[k - 1]
                if best_kth <= ring * index.cell_size or n_seen == n:
                    groups.append(idx[:k].copy())
                    break
            ring += 1
        # (loop exits via break above; n_seen == n guarantees termination)
    return NeighborSet(groups=groups, k=k)


def radius_group(
    index: GridIndex,
    centers: np.ndarray,
    radius: float,
    max_samples: int,
    seed: int = 0,
) -> NeighborSet:
    """All source points within `radius` of each center, index-sorted.

    Groups larger than max_samples are reduced to a seeded uniform
    subsample of exactly max_samples (still index-sorted); groups may be
    empty.  Membership uses distance <= radius.
    """
    if not radius > 0.0:
        raise ValueError("radius must be positive")
    if max_samples < 1:
        raise ValueError("max_samples must be >= 1")
    centers = np.atleast_2d(np.asarray(centers, dtype=np.float64))
    rng = np.random.default_rng(seed)
    reach = int(np.ceil(radius / index.cell_size))
    span = range(-reach, reach + 1)
    offsets = [(dx, dy, dz) for dx in span for dy in span for dz in span]
    cell_coords = np.floor(centers / index.cell_size).astype(np.int64).tolist()
    r2 = radius * radius
    lookup = index.cells.get

    # gather candidates for every center, then do one batched distance pass
    cand_per_center: list = []
    lengths = np.empty(centers.shape[0], dtype=np.int64)
    for ci, (bx, by, bz) in enumerate(cell_coords):
        cand = [
            hit
            for dx, dy, dz in offsets
            if (hit := lookup((bx + dx, by + dy, bz + dz))) is not None
        ]
        idx = (
            np.empty(0, dtype=np.int64)
            if not cand
            else (cand[0] if len(cand) == 1 else np.concatenate(cand))
        )
        cand_per_center.append(idx)
        lengths[ci] = idx.shape[0]

    flat_idx = np.concatenate(cand_per_center) if cand_per_center else np.empty(0, np.int64)
    owner = np.repeat(np.arange(centers.shape[0]), lengths)
    diff = index.points[flat_idx] - centers[owner]
    inside = np.einsum("ij,ij->i", diff, diff) <= r2
    bounds = np.concatenate([[0], np.cumsum(lengths)])

    groups = []
    for ci in range(centers.shape[0]):
        lo, hi = bounds[ci], bounds[ci + 1]
        hit = np.sort(flat_idx[lo:hi][inside[lo:hi]])
        if hit.shape[0] > max_samples:
            pick = rng.choice(hit.shape[0], size=max_samples, replace=False)
            hit = hit[np.sort(pick)]
        groups.append(hit)
    return NeighborSet(groups=groups, radius=float(radius))


def random_sampling(points: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Uniform sample of k distinct indices; the random-keypoint sampler."""
    n = np.asarray(points).shape[0]
    if not 1 <= k <= n:
        raise KTooLargeError(f"k={k} outside [1, {n}]")
    return np.sort(np.random.default_rng(seed).choice(n, size=k, replace=False))
