"""k-means++ seeding, Lloyd iterations and an anchor-constrained variant.

All routines work internally on the points sorted into a canonical
(lexicographic) order, so seeded sampling and every floating-point
reduction is independent of the order the caller passes points in; only the
returned assignment vector follows the caller's order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FREE = -1


class KMeansError(ValueError):
    pass


@dataclass
class ClusterOutcome:
    assignments: np.ndarray
    centroids: np.ndarray
    inertia: float
    iterations: int
    trace: list[float]

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Stable lexicographic row order (first column is the primary key)."""
    points = np.asarray(points, dtype=np.float64)
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return np.lexsort(points.T[::-1])


def count_distinct(points: np.ndarray) -> int:
    return np.unique(np.asarray(points, dtype=np.float64), axis=0).shape[0]


def sq_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = points[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _pp_extend(pts, chosen, k, rng, pool=None):
    """Grow ``chosen`` (list of centroid rows) to ``k`` rows by D^2 sampling over ``pts[pool]``."""
    cand = pts if pool is None else pts[pool]
    if cand.shape[0] == 0 and len(chosen) < k:
        raise KMeansError("no candidate points for k-means++ seeding")
    if not chosen:
        chosen = [cand[int(rng.integers(cand.shape[0]))]]
    d2 = np.min(sq_distances(cand, np.array(chosen)), axis=1)
    while len(chosen) < k:
        total = d2.sum()
        if not total > 0:
            raise KMeansError(f"cannot seed {k} centroids: fewer distinct candidate points than clusters")
        cum = np.cumsum(d2)
        idx = int(np.searchsorted(cum, rng.random() * total, side="right"))
        idx = min(idx, cand.shape[0] - 1)
        if d2[idx] == 0:  # rounding at a cumsum plateau; never re-pick a seeded point
            idx = int(np.flatnonzero(d2 > 0)[-1])
        chosen.append(cand[idx])
        d2 = np.minimum(d2, sq_distances(cand, cand[idx][None, :])[:, 0])
    return np.array(chosen)


def kmeanspp_init(points, k: int, seed: int) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise KMeansError("k must be >= 1")
    if k > count_distinct(pts):
        raise KMeansError(f"k={k} exceeds the number of distinct points ({count_distinct(pts)})")
    pts = pts[canonical_order(pts)]
    return _pp_extend(pts, [], k, np.random.default_rng(seed))


def _inertia(pts, assign, centroids):
    diff = pts - centroids[assign]
    return float(np.einsum("nd,nd->", diff, diff))


def _update(pts, assign, centroids):
    new = centroids.copy()
    for c in range(centroids.shape[0]):
        members = assign == c
        if members.any():
            new[c] = pts[members].mean(axis=0)
    return new


def _repair_empty(pts, assign, centroids, locked):
    """Give each empty cluster the free point farthest from its own centroid."""
    counts = np.bincount(assign, minlength=centroids.shape[0])
    for c in np.flatnonzero(counts == 0):
        dist = np.einsum("nd,nd->n", pts - centroids[assign], pts - centroids[assign])
        eligible = ~locked & (counts[assign] >= 2) & (dist > 0)
        if not eligible.any():
            continue
        dist = np.where(eligible, dist, -1.0)
        i = int(np.argmax(dist))
        counts[assign[i]] -= 1
        assign[i] = c
        counts[c] = 1
        centroids[c] = pts[i]
    return assign, centroids


def _iterate(pts, forced, centroids, max_iter, tol):
    locked = forced != FREE
    centroids = centroids.copy()
    assign = None
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        new_assign = np.argmin(sq_distances(pts, centroids), axis=1)
        new_assign[locked] = forced[locked]
        new_assign, centroids = _repair_empty(pts, new_assign, centroids, locked)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        new_centroids = _update(pts, assign, centroids)
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        trace.append(_inertia(pts, assign, centroids))
        if shift < tol:
            break
    return assign, centroids, it, trace


def _run(points, forced, k, seed, init, init_pool, max_iter, tol):
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[0] == 0:
        raise KMeansError("points must be a non-empty n x d matrix")
    if k < 1:
        raise KMeansError("k must be >= 1")
    order = canonical_order(pts)
    pts = pts[order]
    forced = forced[order]
    rng = np.random.default_rng(seed)
    prefix = [] if init is None else [row for row in np.asarray(init, dtype=np.float64)]
    if len(prefix) > k:
        raise KMeansError(f"{len(prefix)} initial centroids given for k={k}")
    if len(prefix) < k:
        pool = None if init_pool is None else np.asarray(init_pool, dtype=bool)[order]
        cand = pts if pool is None else pts[pool]
        if cand.shape[0] == 0 or k - len(prefix) > count_distinct(cand):
            raise KMeansError(f"k={k} exceeds the number of distinct points available for seeding")
        centroids = _pp_extend(pts, prefix, k, rng, pool)
    else:
        centroids = np.array(prefix)
    assign, centroids, iters, trace = _iterate(pts, forced, centroids, max_iter, tol)
    out = np.empty_like(assign)
    out[order] = assign
    return ClusterOutcome(out, centroids, _inertia(pts, assign, centroids), iters, trace)


def lloyd(points, k: int, seed: int = 0, max_iter: int = 300, tol: float = 1e-8, init=None) -> ClusterOutcome:
    """Plain Lloyd iterations from k-means++ seeding (or from ``init`` when given)."""
    pts = np.asarray(points, dtype=np.float64)
    if init is None and k > count_distinct(pts):
        raise KMeansError(f"k={k} exceeds the number of distinct points ({count_distinct(pts)})")
    forced = np.full(pts.shape[0], FREE, dtype=np.int64)
    return _run(pts, forced, k, seed, init, None, max_iter, tol)


def constrained_lloyd(
    points,
    forced,
    k: int,
    seed: int = 0,
    init=None,
    init_pool=None,
    max_iter: int = 300,
    tol: float = 1e-8,
) -> ClusterOutcome:
    """Lloyd iterations where points with ``forced[i] >= 0`` never leave cluster ``forced[i]``.

    ``init`` supplies the leading centroid slots (e.g. probe class means); any
    remaining slots are seeded by k-means++ over ``points[init_pool]``
    (all points when ``init_pool`` is None), continuing from the supplied
    centroids.
    """
    pts = np.asarray(points, dtype=np.float64)
    forced = np.asarray(forced, dtype=np.int64)
    if forced.shape != (pts.shape[0],):
        raise KMeansError("forced must hold one entry per point")
    if np.any(forced >= k) or np.any(forced < FREE):
        raise KMeansError(f"forced cluster ids must lie in [0, {k}) or be -1")
    return _run(pts, forced, k, seed, init, init_pool, max_iter, tol)


def best_of(runs) -> ClusterOutcome:
    """Lowest-inertia outcome; earlier runs win ties."""
    best = None
    for outcome in runs:
        if best is None or outcome.inertia < best.inertia:
            best = outcome
    return best


def kmeans(points, k: int, seed: int = 0, n_init: int = 10, **kw) -> ClusterOutcome:
    """Best of ``n_init`` seeded Lloyd runs."""
    seeds = np.random.SeedSequence(seed).generate_state(n_init)
    return best_of(lloyd(points, k, int(s), **kw) for s in seeds)
