"""Sparse-controlled densification of a sparse Gaussian cloud.

Every sparse point spawns ``n_new`` candidates drawn uniformly inside the
axis-aligned box spanned by the point and its ``k`` nearest sparse neighbours.
Candidates farther than ``dist_threshold`` from every sparse point are dropped;
survivors copy the attributes of their nearest sparse point with half its scale.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .scene import GaussianCloud

BRUTE_FORCE_LIMIT = 256
RNG_ALGORITHM = "numpy-philox4x64-10"
NEW_POINT_SCALE = 0.5


@dataclass(frozen=True)
class DensifyConfig:
    n_new: int = 8
    k: int = 4
    dist_threshold: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_new < 0:
            raise ValueError("n_new must be >= 0")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if not self.dist_threshold > 0:
            raise ValueError("dist_threshold must be > 0")


def knn_query(points: np.ndarray, query: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact k nearest neighbours of ``query``, ascending by distance, ties by lower index."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    query = np.asarray(query, dtype=np.float64).reshape(3)
    if len(points) == 0:
        raise ValueError("points must be non-empty")
    if not 1 <= k <= len(points):
        raise ValueError(f"k={k} must be in [1, {len(points)}]")
    if len(points) < BRUTE_FORCE_LIMIT:
        d = np.linalg.norm(points - query, axis=1)
        idx = np.argsort(d, kind="stable")[:k]
        return idx, d[idx]
    return _tree_knn(cKDTree(points), points, query, k)


def _tree_knn(tree: cKDTree, points: np.ndarray, query: np.ndarray, k: int):
    dk, _ = tree.query(query, k=k)
    radius = float(np.atleast_1d(dk)[-1])
    # everything within the k-th distance, then an exact (distance, index) sort
    cand = np.array(sorted(tree.query_ball_point(query, radius * (1 + 1e-12) + 1e-300)), dtype=np.int64)
    d = np.linalg.norm(points[cand] - query, axis=1)
    order = np.lexsort((cand, d))[:k]
    return cand[order], d[order]


def nearest_indices(points: np.ndarray, queries: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest point index and distance for each query (ties by lower index)."""
    points = np.asarray(points, dtype=np.float64)
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(queries) == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0)
    if len(points) < BRUTE_FORCE_LIMIT:
        d = np.linalg.norm(queries[:, None, :] - points[None, :, :], axis=2)
        idx = np.argmin(d, axis=1)  # first occurrence == lowest index
        return idx, d[np.arange(len(queries)), idx]
    tree = cKDTree(points)
    k = min(2, len(points))
    d, idx = tree.query(queries, k=k)
    d, idx = d.reshape(len(queries), k), idx.reshape(len(queries), k)
    out_i, out_d = idx[:, 0].copy(), d[:, 0].copy()
    if k == 2:
        for q in np.flatnonzero(d[:, 1] == d[:, 0]):
            i, dd = _tree_knn(tree, points, queries[q], 1)
            out_i[q], out_d[q] = i[0], dd[0]
    return out_i, out_d


def densify_cloud(sparse: GaussianCloud, cfg: DensifyConfig) -> GaussianCloud:
    if len(sparse) == 0:
        raise ValueError("sparse cloud must be non-empty")
    if cfg.n_new == 0:
        return sparse.copy()
    pts = sparse.positions
    n = len(pts)
    rng = np.random.Generator(np.random.Philox(cfg.seed))
    tree = cKDTree(pts) if n >= BRUTE_FORCE_LIMIT else None
    k = min(cfg.k + 1, n)
    candidates = []
    for i in range(n):
        if tree is None:
            nb, _ = knn_query(pts, pts[i], k)
        else:
            nb, _ = _tree_knn(tree, pts, pts[i], k)
        nb = nb[nb != i][: cfg.k]
        box = pts[np.concatenate([[i], nb])]
        lo, hi = box.min(axis=0), box.max(axis=0)
        candidates.append(lo + rng.random((cfg.n_new, 3)) * (hi - lo))
    cand = np.concatenate(candidates)
    parent, dist = nearest_indices(pts, cand)
    keep = dist <= cfg.dist_threshold
    cand, parent = cand[keep], parent[keep]
    added = sparse.select(parent)
    added.positions = cand
    added.log_scales = added.log_scales + np.log(NEW_POINT_SCALE)
    return sparse.concat(added)
