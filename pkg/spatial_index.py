"""
spatial_index.py
================
Exact nearest-neighbour index over one point set placed in the model frame by
its current rigid transform. Backed by scipy's cKDTree built with balanced
(median) splits on the axis of largest spread.

The index stores transformed coordinates, so it must be rebuilt whenever the
transform of its set changes. Queries are exact; among equidistant points the
smallest point index wins.
"""

import logging
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from geometry import Points, PointSet, RigidTransform, as_point3, transform_points

# --- LOGGER ---
logger = logging.getLogger('spatial_index')
logger.setLevel(logging.INFO)
if not logger.handlers:
    handler = logging.StreamHandler()
    formatter = logging.Formatter('%(asctime)s - 🌲 KD-TREE - %(message)s')
    handler.setFormatter(formatter)
    logger.addHandler(handler)
logger.propagate = False

# Relative gap below which the two best candidates are re-checked for a tie.
_TIE_RTOL = 1e-12


class SpatialIndexError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NnIndex:
    set_index: int
    transform: RigidTransform
    points: Points          # model-frame coordinates, row h is point h of the set
    tree: cKDTree

    def __len__(self) -> int:
        return self.points.shape[0]


def build_index(point_set: PointSet, T: RigidTransform) -> NnIndex:
    if len(point_set) == 0:
        raise SpatialIndexError("empty point set")
    moved = transform_points(T, point_set.points)
    moved.setflags(write=False)
    tree = cKDTree(moved, leafsize=16, balanced_tree=True, compact_nodes=True)
    return NnIndex(point_set.index, T, moved, tree)


def _resolve_ties(index: NnIndex, queries: Points, rows: NDArray[np.int64],
                  best_idx: NDArray[np.int64], best_dist: NDArray[np.float64]) -> None:
    """Replace near-tied answers with the smallest index at exactly minimal distance."""
    for r in rows:
        q = queries[r]
        radius = best_dist[r] * (1.0 + 4 * _TIE_RTOL) + 1e-300
        candidates = np.asarray(index.tree.query_ball_point(q, radius), dtype=np.int64)
        if candidates.size == 0:
            continue
        dist = np.sqrt(np.sum((index.points[candidates] - q) ** 2, axis=1))
        d_min = dist.min()
        winner = candidates[dist == d_min].min()
        best_idx[r] = winner
        best_dist[r] = d_min


def nearest_many(index: NnIndex, queries: Points, workers: int = 1) -> Tuple[NDArray[np.int64], NDArray[np.float64]]:
    """Exact NN (index, distance) for every row of `queries`."""
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if queries.shape[0] == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)

    if len(index) == 1:
        dist = np.sqrt(np.sum((queries - index.points[0]) ** 2, axis=1))
        return np.zeros(queries.shape[0], dtype=np.int64), dist

    dist, idx = index.tree.query(queries, k=2, workers=workers)
    best_dist = np.array(dist[:, 0], dtype=np.float64)
    best_idx = np.array(idx[:, 0], dtype=np.int64)

    tied = np.flatnonzero(dist[:, 1] <= dist[:, 0] * (1.0 + _TIE_RTOL))
    if tied.size:
        _resolve_ties(index, queries, tied, best_idx, best_dist)
    return best_idx, best_dist


def nearest(index: NnIndex, query) -> Tuple[int, float]:
    idx, dist = nearest_many(index, as_point3(query)[None, :])
    return int(idx[0]), float(dist[0])
