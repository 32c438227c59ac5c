"""Dynamic attention: gap statistics of target features and the per-source mask."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.distance import pdist


@dataclass
class KMeansResult:
    assignment: np.ndarray
    centroids: np.ndarray
    wcss: float
    history: list[float] = field(default_factory=list)


def _wcss(points, assignment, centroids) -> float:
    d = points - centroids[assignment]
    return float(np.sum(d * d))


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, max_iters: int = 100,
           restarts: int = 1) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding; best of ``restarts`` by WCSS."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    n = points.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"kmeans: need 1 <= k <= number of points, got k={k}, n={n}")
    best = None
    for _ in range(restarts):
        res = _lloyd(points, k, rng, max_iters)
        if best is None or res.wcss < best.wcss:
            best = res
    return best


def _seed_plus_plus(points, k, rng) -> np.ndarray:
    n = points.shape[0]
    idx = [int(rng.integers(n))]
    d2 = np.sum((points - points[idx[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a centre; pick any unused index
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(unused[rng.integers(unused.size)])
        else:
            nxt = int(rng.choice(n, p=d2 / total))
        idx.append(nxt)
        d2 = np.minimum(d2, np.sum((points - points[nxt]) ** 2, axis=1))
    return points[idx].copy()


def _assign(points, centroids) -> np.ndarray:
    d2 = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
    return np.argmin(d2, axis=1)


def _lloyd(points, k, rng, max_iters) -> KMeansResult:
    centroids = _seed_plus_plus(points, k, rng)
    assignment = _assign(points, centroids)
    history = [_wcss(points, assignment, centroids)]
    for _ in range(max_iters):
        for r in range(k):
            members = points[assignment == r]
            if len(members):
                centroids[r] = members.mean(axis=0)
        new = _assign(points, centroids)
        history.append(_wcss(points, new, centroids))
        if np.array_equal(new, assignment):
            break
        assignment = new
    return KMeansResult(assignment, centroids, history[-1], history)


def gap_statistic(points: np.ndarray, assignment: np.ndarray) -> float:
    """Sum over clusters of (1 / 2 n_r) * sum over ordered pairs of Euclidean distances.

    Empty clusters contribute nothing.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 1:
        points = points[:, None]
    assignment = np.asarray(assignment)
    if assignment.shape != (points.shape[0],):
        raise ValueError("gap_statistic: need exactly one cluster label per point")
    terms = []
    for r in np.unique(assignment):
        members = points[assignment == r]
        n_r = members.shape[0]
        if n_r < 2:
            continue
        # pdist lists each unordered pair once; ordered pairs double it
        terms.append(2.0 * math.fsum(pdist(members)) / (2 * n_r))
    return math.fsum(terms)


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.asarray(x, dtype=np.float64) - np.max(x)
    e = np.exp(z)
    return e / e.sum()


def floor_and_renormalize(weights: np.ndarray, floor: float) -> np.ndarray:
    """Raise entries below ``floor`` to it and rescale the rest to keep unit mass.

    Repeats until no rescaled entry drops under the floor, so the result has
    every entry >= floor and sums to one.
    """
    w = np.asarray(weights, dtype=np.float64).copy()
    n = w.size
    if floor * n > 1 + 1e-12:
        raise ValueError(f"floor {floor} infeasible for {n} sources")
    pinned = np.zeros(n, dtype=bool)
    while True:
        low = (~pinned) & (w < floor)
        if not low.any():
            break
        pinned |= low
        free = ~pinned
        mass = 1.0 - floor * pinned.sum()
        w[pinned] = floor
        if free.any():
            s = w[free].sum()
            w[free] = w[free] / s * mass if s > 0 else mass / free.sum()
    return w / w.sum()


@dataclass
class AttentionState:
    n_sources: int
    k: int = 2
    floor: float | None = None
    prev_gap: np.ndarray | None = None
    gains: np.ndarray | None = None
    mask: np.ndarray = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.floor is None:
            self.floor = 1.0 / (10 * self.n_sources)
        if self.mask is None:
            self.mask = np.full(self.n_sources, 1.0 / self.n_sources)


def update_mask(state: AttentionState, current_gaps) -> AttentionState:
    """Gains are previous minus current gap statistic; the mask is their floored softmax."""
    cur = np.asarray(current_gaps, dtype=np.float64)
    if cur.shape != (state.n_sources,):
        raise ValueError(f"update_mask: expected {state.n_sources} gap values, got {cur.shape}")
    if state.prev_gap is None:
        gains, mask = None, np.full(state.n_sources, 1.0 / state.n_sources)
    else:
        gains = state.prev_gap - cur
        mask = floor_and_renormalize(softmax(gains), state.floor)
    return AttentionState(state.n_sources, state.k, state.floor, cur.copy(), gains, mask)


def target_gap(probe_features: np.ndarray, k: int, rng: np.random.Generator,
               restarts: int = 3, max_iters: int = 100) -> float:
    """Cluster probe features with k-means and return their gap statistic."""
    res = kmeans(probe_features, k, rng, max_iters=max_iters, restarts=restarts)
    return gap_statistic(probe_features, res.assignment)
