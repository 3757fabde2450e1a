"""Pairwise pseudo-labels for a mini-batch of unlabelled descriptors.

Every labeler returns a symmetric ``m x m`` matrix with a unit diagonal.
``rank`` (top-k set equality) is the default; ``soft_rank``, ``cosine``,
``mutual_nn`` and ``kmeans_batch`` are the alternatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kmeans import count_distinct, lloyd

METHODS = ("rank", "soft_rank", "cosine", "mutual_nn", "kmeans_batch")

# best cosine thresholds found by per-dataset validation on image benchmarks
COSINE_PRESETS = {"cifar10": 0.85, "cifar100": 0.8, "svhn": 0.9}
DEFAULT_K = 5
DEFAULT_SOFT_K = 15


class LabelerError(ValueError):
    pass


@dataclass(frozen=True)
class PseudoLabelMatrix:
    values: np.ndarray
    method: str

    @property
    def m(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class LabelerConfig:
    method: str = "rank"
    k: int = DEFAULT_K
    cosine_threshold: float = 0.85
    batch_kmeans_k: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise LabelerError(f"unknown labeler {self.method!r}; choose from {METHODS}")
        if self.k < 1:
            raise LabelerError("k must be >= 1")
        if not 0.0 < self.cosine_threshold < 1.0:
            raise LabelerError("cosine threshold must lie in (0, 1)")
        if self.batch_kmeans_k is not None and self.batch_kmeans_k < 1:
            raise LabelerError("batch_kmeans_k must be >= 1")


def _as_batch(batch) -> np.ndarray:
    z = np.asarray(batch, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise LabelerError(f"expected an m x d batch with m >= 1, got shape {z.shape}")
    return z


def _topk_indices(z: np.ndarray, k: int) -> np.ndarray:
    d = z.shape[-1]
    if not 1 <= k <= d:
        raise LabelerError(f"top-k needs 1 <= k <= d, got k={k}, d={d}")
    # stable sort on the negated values: equal entries keep index order
    return np.argsort(-z, axis=-1, kind="stable")[..., :k]


def topk_set(z, k: int) -> frozenset[int]:
    """Indices of the k largest components of ``z``; ties go to the lower index."""
    z = np.asarray(z, dtype=np.float64)
    return frozenset(int(i) for i in _topk_indices(z, k))


def _topk_indicator(z: np.ndarray, k: int) -> np.ndarray:
    idx = _topk_indices(z, k)
    ind = np.zeros(z.shape, dtype=np.int64)
    np.put_along_axis(ind, idx, 1, axis=1)
    return ind


def rank_stats_labels(batch, k: int = DEFAULT_K) -> PseudoLabelMatrix:
    z = _as_batch(batch)
    ind = _topk_indicator(z, k)
    _, group = np.unique(ind, axis=0, return_inverse=True)
    group = group.reshape(-1)
    return PseudoLabelMatrix((group[:, None] == group[None, :]).astype(np.float64), "rank")


def soft_rank_labels(batch, k: int = DEFAULT_SOFT_K) -> PseudoLabelMatrix:
    z = _as_batch(batch)
    ind = _topk_indicator(z, k)
    shared = ind @ ind.T  # integer counts, exactly symmetric
    return PseudoLabelMatrix(shared / float(k), "soft_rank")


def cosine_labels(batch, threshold: float) -> PseudoLabelMatrix:
    z = _as_batch(batch)
    if not 0.0 < threshold < 1.0:
        raise LabelerError("cosine threshold must lie in (0, 1)")
    norms = np.linalg.norm(z, axis=1)
    if np.any(norms == 0):
        raise LabelerError(f"row {int(np.argmax(norms == 0))} has zero norm; cosine similarity undefined")
    zn = z / norms[:, None]
    cos = zn @ zn.T
    cos = (cos + cos.T) / 2.0
    values = (cos >= threshold).astype(np.float64)
    np.fill_diagonal(values, 1.0)
    return PseudoLabelMatrix(values, "cosine")


def nearest_neighbours(z: np.ndarray) -> np.ndarray:
    """Index of each row's nearest other row (squared Euclidean; ties to the lower index)."""
    diff = z[:, None, :] - z[None, :, :]
    d2 = np.einsum("ijd,ijd->ij", diff, diff)
    np.fill_diagonal(d2, np.inf)
    return np.argmin(d2, axis=1)


def mutual_nn_labels(batch) -> PseudoLabelMatrix:
    z = _as_batch(batch)
    m = z.shape[0]
    if m < 2:
        raise LabelerError("mutual nearest-neighbour labels need at least two points")
    nn = nearest_neighbours(z)
    idx = np.arange(m)
    values = (nn[:, None] == idx[None, :]) | (nn[None, :] == idx[:, None]) | (nn[:, None] == nn[None, :])
    return PseudoLabelMatrix(values.astype(np.float64), "mutual_nn")


def kmeans_batch_labels(batch, k_clusters: int, seed: int = 0) -> PseudoLabelMatrix:
    z = _as_batch(batch)
    if not 1 <= k_clusters <= z.shape[0]:
        raise LabelerError(f"k_clusters must be in [1, {z.shape[0]}], got {k_clusters}")
    assign = lloyd(z, k_clusters, seed).assignments
    return PseudoLabelMatrix((assign[:, None] == assign[None, :]).astype(np.float64), "kmeans_batch")


def make_labels(batch, cfg: LabelerConfig, n_clusters: int | None = None, seed: int = 0) -> PseudoLabelMatrix:
    """Dispatch on ``cfg.method``; ``n_clusters`` is the fallback k for the batch k-means labeler."""
    if cfg.method == "rank":
        return rank_stats_labels(batch, cfg.k)
    if cfg.method == "soft_rank":
        return soft_rank_labels(batch, cfg.k)
    if cfg.method == "cosine":
        return cosine_labels(batch, cfg.cosine_threshold)
    if cfg.method == "mutual_nn":
        return mutual_nn_labels(batch)
    k = cfg.batch_kmeans_k or n_clusters
    if k is None:
        raise LabelerError("batch k-means labeler needs a cluster count")
    # a batch may hold fewer distinct descriptors than requested clusters
    return kmeans_batch_labels(batch, min(k, count_distinct(_as_batch(batch))), seed)
