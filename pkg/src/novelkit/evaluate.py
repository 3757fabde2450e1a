"""Hungarian matching, clustering accuracy, Silhouette and the old/new/all protocol."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class Assignment:
    pairs: tuple[tuple[int, int], ...]
    cost: float

    @property
    def mapping(self) -> dict[int, int]:
        return dict(self.pairs)


def _solve_square(a: np.ndarray):
    """Shortest augmenting path Hungarian method; returns column-of-row and dual potentials."""
    n = a.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) matched to column j
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = a[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of = np.empty(n, dtype=np.int64)
    col_of[p[1:] - 1] = np.arange(n)
    return col_of, u[1:], v[1:]


def _lexicographic(tight: np.ndarray, col_of: np.ndarray, rows_to_fix: int) -> np.ndarray:
    """Among perfect matchings of the tight-edge graph, pick rows' columns lexicographically."""
    n = tight.shape[0]
    col_of = col_of.copy()
    row_of = np.empty(n, dtype=np.int64)
    row_of[col_of] = np.arange(n)
    for i in range(rows_to_fix):
        for j in np.flatnonzero(tight[i]):
            if j == col_of[i]:
                break
            if row_of[j] < i:
                continue
            # look for an alternating path from row_of[j] to col_of[i] avoiding fixed rows and column j
            target = col_of[i]
            start = row_of[j]
            prev_col = {start: None}
            came_from = {}
            queue = deque([start])
            seen_cols = {j}
            found = None
            while queue and found is None:
                r = queue.popleft()
                for c in np.flatnonzero(tight[r]):
                    c = int(c)
                    if c in seen_cols or row_of[c] < i:
                        continue
                    seen_cols.add(c)
                    came_from[c] = r
                    if c == target:
                        found = c
                        break
                    nxt = int(row_of[c])
                    if nxt != i:
                        prev_col[nxt] = c
                        queue.append(nxt)
            if found is None:
                continue
            c = found
            while c is not None:
                r = came_from[c]
                back = prev_col[r]
                col_of[r] = c
                row_of[c] = r
                c = back
            col_of[i] = j
            row_of[j] = i
            break
    return col_of


def hungarian(cost) -> Assignment:
    """Minimum-cost one-to-one matching of ``min(r, c)`` row/column pairs.

    Rectangular inputs are padded with zero-cost dummy rows or columns.
    Among optimal matchings, rows (in order) take the smallest column index
    that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise EvaluationError("cost matrix must be a non-empty 2-D array")
    if not np.all(np.isfinite(cost)):
        raise EvaluationError("cost matrix must be finite")
    r, c = cost.shape
    n = max(r, c)
    square = np.zeros((n, n))
    square[:r, :c] = cost
    col_of, u, v = _solve_square(square)
    reduced = square - u[:, None] - v[None, :]
    tol = 1e-9 * (1.0 + np.abs(square).max())
    tight = reduced <= tol
    tight[np.arange(n), col_of] = True
    refined = _lexicographic(tight, col_of, r)
    base = float(square[np.arange(n), col_of].sum())
    if float(square[np.arange(n), refined].sum()) <= base + tol * n:
        col_of = refined
    pairs = tuple((i, int(col_of[i])) for i in range(r) if col_of[i] < c)
    total = 0.0
    for i, j in pairs:
        total += cost[i, j]
    return Assignment(pairs, float(total))


def contingency(pred, gt):
    """Counts table with rows = sorted unique predictions, columns = sorted unique truths."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    p_ids, p_idx = np.unique(pred, return_inverse=True)
    g_ids, g_idx = np.unique(gt, return_inverse=True)
    table = np.zeros((p_ids.size, g_ids.size), dtype=np.int64)
    np.add.at(table, (p_idx.reshape(-1), g_idx.reshape(-1)), 1)
    return table, p_ids, g_ids


def match_clusters(pred, gt) -> dict[int, int]:
    """Best injective map from predicted cluster ids to ground-truth ids."""
    table, p_ids, g_ids = contingency(pred, gt)
    assignment = hungarian(-table)
    return {int(p_ids[i]): int(g_ids[j]) for i, j in assignment.pairs}


def clustering_acc(pred, gt) -> float:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise EvaluationError(f"length mismatch: {pred.shape} predictions vs {gt.shape} labels")
    if pred.size == 0:
        raise EvaluationError("cannot score an empty clustering")
    table, _, _ = contingency(pred, gt)
    assignment = hungarian(-table)
    hits = sum(int(table[i, j]) for i, j in assignment.pairs)
    return hits / pred.size


def silhouette(points, assignments, subset=None) -> float:
    """Mean Silhouette value under Euclidean distance.

    Points in singleton clusters, and points with ``a = b = 0``, contribute 0.
    With a boolean ``subset`` the mean runs over those points only, while
    ``a`` and ``b`` still see every member of every cluster.
    """
    pts = np.asarray(points, dtype=np.float64)
    assign = np.asarray(assignments)
    if pts.shape[0] != assign.shape[0]:
        raise EvaluationError("points and assignments differ in length")
    ids, idx = np.unique(assign, return_inverse=True)
    idx = idx.reshape(-1)
    if ids.size < 2:
        raise EvaluationError("Silhouette is undefined for fewer than two clusters")
    rows = np.arange(pts.shape[0])
    if subset is not None:
        subset = np.asarray(subset, dtype=bool)
        if subset.shape != (pts.shape[0],) or not subset.any():
            raise EvaluationError("subset must be a non-empty mask with one entry per point")
        rows = rows[subset]
    onehot = np.zeros((pts.shape[0], ids.size))
    onehot[np.arange(pts.shape[0]), idx] = 1.0
    sums = cdist(pts[rows], pts) @ onehot
    sizes = onehot.sum(axis=0)
    own_idx = idx[rows]
    local = np.arange(rows.size)
    own = sizes[own_idx]
    a = np.where(own > 1, sums[local, own_idx] / np.maximum(own - 1, 1), 0.0)
    means = sums / sizes[None, :]
    means[local, own_idx] = np.inf
    b = means.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where((own > 1) & (denom > 0), (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(s.mean())


def confusion_matrix(pred, gt) -> dict:
    table, p_ids, g_ids = contingency(pred, gt)
    return {"truth": g_ids.tolist(), "predicted": p_ids.tolist(), "counts": table.T.tolist()}


def novel_slot_mapping(pred, gt, n_labelled: int) -> dict[int, int]:
    """Match extended-head outputs ``>= n_labelled`` to novel class ids, using novel points only."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    keep = (pred >= n_labelled) & (gt >= n_labelled)
    if not keep.any():
        return {}
    return match_clusters(pred[keep], gt[keep])


def old_new_all_accuracy(model, test, n_labelled: int, train_unlabelled=None, rematch_on_test: bool = False) -> dict[str, float]:
    """Accuracy of the extended labelled head on old, new and all test classes.

    Novel outputs are tied to novel classes once, by Hungarian matching on
    ``train_unlabelled`` (its hidden labels), then frozen for the test set;
    ``rematch_on_test`` matches on the test set instead.
    """
    from .model import predict_labelled

    if not model.extended:
        raise EvaluationError("old/new/all accuracy needs an incrementally extended model")
    if test.labels is None:
        raise EvaluationError("test set has no labels")
    pred = predict_labelled(model, test.features)
    if rematch_on_test or train_unlabelled is None:
        mapping = novel_slot_mapping(pred, test.labels, n_labelled)
    else:
        if train_unlabelled.labels is None:
            raise EvaluationError("training unlabelled set carries no hidden labels to match on")
        mapping = novel_slot_mapping(predict_labelled(model, train_unlabelled.features), train_unlabelled.labels, n_labelled)
    mapped = np.array([p if p < n_labelled else mapping.get(int(p), -1) for p in pred])
    hit = mapped == test.labels
    old = test.labels < n_labelled
    score = lambda mask: float(hit[mask].mean()) if mask.any() else float("nan")
    return {"old": score(old), "new": score(~old), "all": score(np.ones_like(old))}
