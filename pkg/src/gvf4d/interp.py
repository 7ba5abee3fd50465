"""Point-cloud utilities: exact KNN, adaptive-radius interpolation weights,
mesh-guided displacement interpolation and farthest point sampling.

All functions are pure numpy (float64 internally) and deterministic; ties are
broken by lower index so results are stable across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_K = 8
DEFAULT_BETA = 7.0

_RADIUS_FLOOR = 1e-8


@dataclass
class KnnResult:
    """Exact K-nearest-neighbour indices/distances, row-sorted ascending."""

    indices: np.ndarray  # (M, K) int64
    distances: np.ndarray  # (M, K) float64


@dataclass
class InterpWeights:
    weights: np.ndarray  # (M, K), in (0, 1]
    radii: np.ndarray  # (M,)


def knn(queries: np.ndarray, references: np.ndarray, k: int) -> KnnResult:
    """Exact Euclidean KNN by brute force; ties broken by lower reference index."""
    queries = np.asarray(queries, dtype=np.float64)
    references = np.asarray(references, dtype=np.float64)
    n = references.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds reference count {n}")
    diff = queries[:, None, :] - references[None, :, :]
    dist = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
    # stable argsort keeps lower indices first among exact ties
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return KnnResult(indices=order, distances=np.take_along_axis(dist, order, axis=1))


def adaptive_weights(result: KnnResult, beta: float = DEFAULT_BETA) -> InterpWeights:
    """Influence weights w = exp(-beta * d / r^2) with r^2 the mean neighbour distance.

    If every neighbour distance is zero the radius degenerates; weights are
    then all 1 and the radius is floored at 1e-8.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    d = result.distances
    r_sq = d.mean(axis=1)
    degenerate = r_sq <= 0.0
    r_sq = np.where(degenerate, _RADIUS_FLOOR**2, r_sq)
    weights = np.exp(-beta * d / r_sq[:, None])
    weights[degenerate] = 1.0
    radii = np.sqrt(d.mean(axis=1))
    radii = np.where(degenerate, _RADIUS_FLOOR, radii)
    return InterpWeights(weights=weights, radii=radii)


def interpolate_displacements(
    g_positions: np.ndarray,
    p1: np.ndarray,
    dp_t: np.ndarray,
    k: int = DEFAULT_K,
    beta: float = DEFAULT_BETA,
) -> np.ndarray:
    """Transfer per-point displacements onto query positions.

    For each query, the K nearest reference points contribute their
    displacement with normalized adaptive weights: a convex combination,
    so constant fields are reproduced exactly.
    """
    dp_t = np.asarray(dp_t, dtype=np.float64)
    nn_res = knn(g_positions, p1, k)
    w = adaptive_weights(nn_res, beta).weights
    w = w / w.sum(axis=1, keepdims=True)
    return np.einsum("mk,mkd->md", w, dp_t[nn_res.indices])


def interpolate_displacement_sequence(
    g_positions: np.ndarray,
    p1: np.ndarray,
    displacements: np.ndarray,
    k: int = DEFAULT_K,
    beta: float = DEFAULT_BETA,
) -> np.ndarray:
    """Vectorized interpolation of a (T, N, 3) displacement stack -> (T, M, 3).

    KNN/weights depend only on canonical geometry, so they are computed once
    and reused for every frame.
    """
    displacements = np.asarray(displacements, dtype=np.float64)
    nn_res = knn(g_positions, p1, k)
    w = adaptive_weights(nn_res, beta).weights
    w = w / w.sum(axis=1, keepdims=True)
    return np.einsum("mk,tmkd->tmd", w, displacements[:, nn_res.indices])


def farthest_point_sampling(points: np.ndarray, count: int, start: int = 0) -> np.ndarray:
    """Greedy max-min subset selection; returns `count` indices in pick order.

    The first pick is `start` (index 0 by default; callers may pass a
    seed-chosen index). Each later pick maximizes the minimum distance to the
    selected set, ties broken by lower index (np.argmax takes the first max).
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if count > n:
        raise ValueError(f"cannot select {count} points from {n}")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range")
    selected = np.empty(count, dtype=np.int64)
    selected[0] = start
    min_sq = np.sum((points - points[start]) ** 2, axis=1)
    for i in range(1, count):
        pick = int(np.argmax(min_sq))
        selected[i] = pick
        d_sq = np.sum((points - points[pick]) ** 2, axis=1)
        np.minimum(min_sq, d_sq, out=min_sq)
    return selected
