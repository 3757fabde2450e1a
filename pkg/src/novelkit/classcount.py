"""Estimate the number of novel classes with a constrained k-means sweep.

Labelled probe classes are clustered together with the unlabelled data for
every candidate novel-class count. Anchor probe points are pinned to their
own clusters while validation probe points are clustered like unlabelled
data. Each candidate is scored by the clustering accuracy of the validation
points and by the Silhouette index of the unlabelled points. The two best candidates are
averaged, clustering is rerun at that count, and tiny novel clusters are
discarded.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .dataio import EmbeddingDataset, ProbeSplit
from .evaluate import clustering_acc, contingency, hungarian, silhouette
from .kmeans import FREE, ClusterOutcome, best_of, constrained_lloyd, count_distinct

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EstimationConfig:
    max_novel: int = 100
    outlier_tau: float = 0.01
    restarts: int = 5
    seed: int = 0
    threads: int = 1
    # seed validation slots at their class means instead of treating validation points as unlabelled
    reserve_validation_slots: bool = False

    def __post_init__(self):
        if self.max_novel < 1:
            raise ValueError("max_novel must be >= 1")
        if not 0.0 < self.outlier_tau < 1.0:
            raise ValueError("outlier_tau must lie in (0, 1)")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")


@dataclass
class SweepRecord:
    candidate: int
    acc_validation_probe: float | None
    cvi_unlabelled: float | None
    note: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class Estimate:
    estimate: int
    sweep: list[SweepRecord]
    best_by_acc: int
    best_by_cvi: int | None
    averaged: int
    surviving_clusters: list[int]


@dataclass
class _Problem:
    points: np.ndarray
    forced: np.ndarray
    truth: np.ndarray  # class id for probe points, -1 for unlabelled
    is_unlabelled: np.ndarray
    is_validation: np.ndarray
    init: np.ndarray  # anchor class means, then validation means if reserved
    pool: np.ndarray  # points that may seed the remaining slots
    n_anchor: int
    n_probe: int


def _build(probe: EmbeddingDataset, split: ProbeSplit, unlabelled: EmbeddingDataset, reserve_validation: bool = False) -> _Problem:
    if not split.anchor_probe or not split.validation_probe:
        raise ValueError("anchor and validation probe sets must both be non-empty")
    if unlabelled.n == 0:
        raise ValueError("unlabelled set is empty")
    if probe.labels is None:
        raise ValueError("probe data needs class labels")
    classes = split.probe_classes
    keep = np.isin(probe.labels, classes)
    p_feats = probe.features[keep]
    p_labels = probe.labels[keep]
    slot = {c: i for i, c in enumerate(classes)}
    present = set(np.unique(p_labels).tolist())
    missing = [c for c in classes if c not in present]
    if missing:
        raise ValueError(f"probe classes {missing} have no points")
    n_anchor = len(split.anchor_probe)
    forced_probe = np.array([slot[c] if slot[c] < n_anchor else FREE for c in p_labels], dtype=np.int64)
    init = np.array([p_feats[p_labels == c].mean(axis=0) for c in classes])
    points = np.vstack([p_feats, unlabelled.features])
    n_u = unlabelled.n
    is_unlabelled = np.concatenate([np.zeros(p_labels.size, dtype=bool), np.ones(n_u, dtype=bool)])
    is_validation = np.concatenate([forced_probe == FREE, np.zeros(n_u, dtype=bool)])
    return _Problem(
        points=points,
        forced=np.concatenate([forced_probe, np.full(n_u, FREE, dtype=np.int64)]),
        truth=np.concatenate([p_labels, np.full(n_u, -1, dtype=np.int64)]),
        is_unlabelled=is_unlabelled,
        is_validation=is_validation,
        init=init if reserve_validation else init[:n_anchor],
        pool=is_unlabelled if reserve_validation else is_unlabelled | is_validation,
        n_anchor=n_anchor,
        n_probe=len(classes),
    )


def _cluster(prob: _Problem, n_novel: int, restarts: int, seed: int) -> ClusterOutcome:
    k = prob.n_probe + n_novel
    seeds = np.random.SeedSequence([seed, n_novel]).generate_state(restarts)
    runs = (
        constrained_lloyd(prob.points, prob.forced, k, int(s), init=prob.init, init_pool=prob.pool)
        for s in seeds
    )
    return best_of(runs)


def validation_acc(assign: np.ndarray, prob: _Problem) -> float:
    """ACC of validation probe points, matched to non-anchor clusters only."""
    pred = assign[prob.is_validation]
    truth = prob.truth[prob.is_validation]
    table, p_ids, _ = contingency(pred, truth)
    table = table[p_ids >= prob.n_anchor]
    if table.shape[0] == 0:
        return 0.0
    matched = hungarian(-table)
    return sum(int(table[i, j]) for i, j in matched.pairs) / pred.size


def _score(prob: _Problem, n_novel: int, cfg: EstimationConfig) -> SweepRecord:
    outcome = _cluster(prob, n_novel, cfg.restarts, cfg.seed)
    acc = validation_acc(outcome.assignments, prob)
    # averaged over unlabelled points, but a and b see the probe members of each cluster too,
    # so novel classes hiding inside probe clusters are penalised
    cvi = None
    note = ""
    if n_novel == 0:
        note = "no novel clusters; Silhouette skipped"
    elif np.unique(outcome.assignments).size < 2:
        note = "single cluster; Silhouette undefined"
    else:
        cvi = silhouette(prob.points, outcome.assignments, subset=prob.is_unlabelled)
    return SweepRecord(n_novel, acc, cvi, note)


def _argmax_smallest(values: list[tuple[int, float]]) -> int:
    best_c, best_v = None, -math.inf
    for c, v in values:
        if v > best_v:
            best_c, best_v = c, v
    return best_c


def drop_outlier_clusters(outcome: ClusterOutcome, novel_slot_ids, unlabelled_mask, tau: float) -> list[int]:
    """Novel clusters whose unlabelled mass reaches ``tau`` times the largest one's."""
    novel = [int(c) for c in novel_slot_ids]
    if not novel:
        raise ValueError("novel_slot_ids must be non-empty")
    assign = np.asarray(outcome.assignments)[np.asarray(unlabelled_mask, dtype=bool)]
    mass = {c: int(np.sum(assign == c)) for c in novel}
    top = max(mass.values())
    keep = [c for c in novel if mass[c] >= tau * top and mass[c] > 0]
    if not keep:
        keep = [max(novel, key=lambda c: (mass[c], -c))]
    return keep


def estimate_class_count(probe: EmbeddingDataset, split: ProbeSplit, unlabelled: EmbeddingDataset, cfg: EstimationConfig = EstimationConfig()) -> Estimate:
    prob = _build(probe, split, unlabelled, cfg.reserve_validation_slots)
    n_distinct = count_distinct(prob.points)
    # slots beyond the seeded ones are drawn from distinct pool points
    seedable = count_distinct(prob.points[prob.pool]) - (prob.n_probe - prob.init.shape[0])
    limit = max(0, min(cfg.max_novel, n_distinct - prob.n_probe, seedable))
    candidates = list(range(0, limit + 1))
    if cfg.threads > 1:
        with ThreadPoolExecutor(cfg.threads) as pool:
            sweep = list(pool.map(lambda c: _score(prob, c, cfg), candidates))
    else:
        sweep = [_score(prob, c, cfg) for c in candidates]
    if limit < cfg.max_novel:
        log.warning("sweep truncated at %d novel classes: only %d distinct points", limit, n_distinct)
        sweep.append(SweepRecord(limit + 1, None, None, f"truncated: {n_distinct} distinct points"))

    scored = [r for r in sweep if r.acc_validation_probe is not None]
    best_acc = _argmax_smallest([(r.candidate, r.acc_validation_probe) for r in scored])
    cvis = [(r.candidate, r.cvi_unlabelled) for r in scored if r.cvi_unlabelled is not None]
    best_cvi = _argmax_smallest(cvis) if cvis else None
    if best_cvi is None:
        averaged = best_acc
    else:
        averaged = int(math.floor((best_acc + best_cvi) / 2 + 0.5))
    if averaged == 0:
        return Estimate(0, sweep, best_acc, best_cvi, 0, [])
    final = _cluster(prob, averaged, cfg.restarts, cfg.seed)
    # every slot not seeded from a reserved class mean can hold a novel class
    novel_slots = range(prob.init.shape[0], prob.n_probe + averaged)
    survivors = drop_outlier_clusters(final, novel_slots, prob.is_unlabelled, cfg.outlier_tau)
    return Estimate(len(survivors), sweep, best_acc, best_cvi, averaged, survivors)
