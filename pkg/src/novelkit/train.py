"""Optimisation loops: supervised warm-up, joint, incremental and clustering training."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .dataio import EmbeddingDataset
from .evaluate import clustering_acc
from .losses import LossReport, RampSchedule, ce_loss, rampup, total_loss
from .model import DualHeadModel, backward, extend_incremental, forward_batch, init_model, predict_unlabelled
from .pseudolabel import LabelerConfig, make_labels

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class AugmentConfig:
    noise_std: float = 0.1
    dropout_p: float = 0.02

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must lie in [0, 1)")


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 0.01
    lr_decay: tuple[tuple[int, float], ...] = ((170, 0.1),)
    momentum: float = 0.9
    labeler: LabelerConfig = field(default_factory=LabelerConfig)
    ramp: RampSchedule = field(default_factory=RampSchedule)
    incremental_ce: RampSchedule = field(default_factory=lambda: RampSchedule(0.05, 50.0))
    aug: AugmentConfig = field(default_factory=AugmentConfig)
    seed: int = 0
    use_bce: bool = True
    use_mse: bool = True
    threads: int = 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (pairwise losses need pairs)")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        epochs = [e for e, _ in self.lr_decay]
        if any(b <= a for a, b in zip(epochs, epochs[1:])):
            raise ValueError("lr decay epochs must be strictly increasing")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for at, factor in self.lr_decay:
            if epoch >= at:
                lr *= factor
        return lr


@dataclass
class OptimizerState:
    velocity: dict[str, np.ndarray]
    momentum: float = 0.9

    @classmethod
    def for_model(cls, model: DualHeadModel, momentum: float = 0.9) -> "OptimizerState":
        return cls(model.zeros_like(), momentum)


@dataclass
class TrainResult:
    model: DualHeadModel
    losses: list[LossReport]
    acc: list[float | None]
    records: list[dict]


def augment(x, aug: AugmentConfig, rng: np.random.Generator, scale=None) -> np.ndarray:
    """Feature-space stand-in for image transforms: Gaussian jitter then coordinate dropout.

    ``scale`` is the per-dimension feature std (defaults to the batch's own).
    """
    x = np.asarray(x, dtype=np.float64)
    if scale is None:
        scale = x.std(axis=0)
    noise = rng.normal(size=x.shape) * (aug.noise_std * np.asarray(scale))
    keep = rng.random(size=x.shape) >= aug.dropout_p
    return np.where(keep, x + noise, 0.0)


def sgd_step(model: DualHeadModel, grads: dict, opt: OptimizerState, lr: float) -> None:
    """Classic momentum: ``v <- mu v + g``, ``theta <- theta - lr v`` (in place)."""
    for name, g in grads.items():
        if g.shape != model.params[name].shape:
            raise TrainingError(f"gradient for {name} has shape {g.shape}, expected {model.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for {name}")
    for name, g in grads.items():
        v = opt.velocity[name]
        v *= opt.momentum
        v += g
        model.params[name] -= lr * v


def _batches(n: int, size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, size):
        idx = perm[start:start + size]
        if idx.size >= 2:
            yield idx


def _two_views(model, x, sched, rng, scale, pool):
    v1 = augment(x, sched.aug, rng, scale)
    v2 = augment(x, sched.aug, rng, scale)
    if pool is None:
        return forward_batch(model, v1), forward_batch(model, v2)
    f1 = pool.submit(forward_batch, model, v1)
    f2 = pool.submit(forward_batch, model, v2)
    return f1.result(), f2.result()


def _mean_report(reports: list[LossReport], omega: float) -> LossReport:
    out = LossReport(omega=omega)
    if reports:
        out.ce = float(np.mean([r.ce for r in reports]))
        out.bce = float(np.mean([r.bce for r in reports]))
        out.mse = float(np.mean([r.mse for r in reports]))
    out.total = out.ce + out.bce + out.omega * out.mse
    return out


class _EpochLog:
    def __init__(self, path):
        self.path = None if path is None else Path(path)
        if self.path is not None:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _run(mode, model, features, labels, sched, truth_x, truth_y, log_path):
    """Shared loop; ``labels`` is None in clustering mode."""
    model = model.copy()
    opt = OptimizerState.for_model(model, sched.momentum)
    rng = np.random.default_rng(sched.seed)
    scale = features.std(axis=0)
    n_clusters = model.n_unlabelled
    label_seed = np.random.default_rng(sched.seed + 1)

    def labeler(z):
        return make_labels(z, sched.labeler, n_clusters, int(label_seed.integers(2**31)))

    result = TrainResult(model, [], [], [])
    epoch_log = _EpochLog(log_path)
    pool = ThreadPoolExecutor(sched.threads) if sched.threads > 1 else None
    try:
        with threadpool_limits(limits=1):
            for epoch in range(sched.epochs):
                lr = sched.lr_at(epoch)
                reports, histogram = [], np.zeros(model.n_unlabelled, dtype=np.int64)
                for idx in _batches(features.shape[0], sched.batch_size, rng):
                    fws = _two_views(model, features[idx], sched, rng, scale, pool)
                    report, grads, info = total_loss(
                        model, None, None,
                        labels=None if labels is None else labels[idx],
                        r=epoch, mode=mode, labeler=labeler,
                        ramp=sched.ramp, incremental_ce=sched.incremental_ce,
                        use_bce=sched.use_bce, use_mse=sched.use_mse, forwards=fws,
                    )
                    if info["pseudo_targets"] is not None:
                        histogram += np.bincount(info["pseudo_targets"] - model.n_labelled, minlength=model.n_unlabelled)
                    sgd_step(model, grads, opt, lr)
                    reports.append(report)
                summary = _mean_report(reports, rampup(epoch, sched.ramp))
                acc = None
                if truth_y is not None:
                    acc = clustering_acc(predict_unlabelled(model, truth_x), truth_y)
                record = {"epoch": epoch, **summary.as_dict(), "acc_unlabelled": acc}
                if mode == "incremental":
                    record["pseudo_label_histogram"] = histogram.tolist()
                result.losses.append(summary)
                result.acc.append(acc)
                result.records.append(record)
                epoch_log.write(record)
                log.debug("epoch %d %s", epoch, record)
    finally:
        if pool is not None:
            pool.shutdown()
    return result


def _check_heads(model, labelled, unlabelled):
    if labelled is not None and labelled.n == 0:
        raise TrainingError("labelled set is empty")
    if unlabelled.n == 0:
        raise TrainingError("unlabelled set is empty")
    if unlabelled.dim != model.d_in or (labelled is not None and labelled.dim != model.d_in):
        raise TrainingError(f"data dimension does not match model input width {model.d_in}")
    if labelled is not None:
        if labelled.labels is None or np.any(labelled.labels < 0):
            raise TrainingError("every labelled point needs a class label")
        if labelled.labels.max() >= model.n_labelled:
            raise TrainingError(f"labelled class ids exceed the labelled head size {model.n_labelled}")


def _merge(labelled, unlabelled):
    features = np.vstack([labelled.features, unlabelled.features])
    labels = np.concatenate([labelled.labels, np.full(unlabelled.n, -1, dtype=np.int64)])
    return features, labels


def train_supervised(labelled: EmbeddingDataset, model: DualHeadModel, sched: TrainSchedule) -> DualHeadModel:
    """Fine-tune trunk and labelled head with plain cross-entropy (no augmentation)."""
    if labelled.labels is None or np.any(labelled.labels < 0) or labelled.labels.max() >= model.n_labelled_out:
        raise TrainingError("supervised training needs labels within the labelled head")
    model = model.copy()
    opt = OptimizerState.for_model(model, sched.momentum)
    rng = np.random.default_rng(sched.seed)
    with threadpool_limits(limits=1):
        for epoch in range(sched.epochs):
            lr = sched.lr_at(epoch)
            for idx in _batches(labelled.n, sched.batch_size, rng):
                fw = forward_batch(model, labelled.features[idx])
                _, g = ce_loss(fw.p_l, labelled.labels[idx])
                grads = backward(model, fw, g, None)
                sgd_step(model, grads, opt, lr)
    return model


def train_joint(labelled, unlabelled, model, sched: TrainSchedule, truth=None, log_path=None) -> TrainResult:
    """CE on labelled points, pairwise BCE on unlabelled ones, MSE consistency on both.

    Only ``unlabelled.features`` is read; ``truth`` (hidden labels of the
    unlabelled set) is used solely to log per-epoch accuracy.
    """
    _check_heads(model, labelled, unlabelled)
    if model.extended:
        raise TrainingError("joint training expects a model without the incremental extension")
    features, labels = _merge(labelled, unlabelled)
    return _run("joint", model, features, labels, sched, unlabelled.features, truth, log_path)


def train_incremental(labelled, unlabelled, model, sched: TrainSchedule, truth=None, log_path=None) -> TrainResult:
    """Joint training where the extended labelled head also learns the unlabelled head's argmax."""
    if not model.extended:
        raise TrainingError("incremental training needs extend_incremental() first")
    _check_heads(model, labelled, unlabelled)
    features, labels = _merge(labelled, unlabelled)
    return _run("incremental", model, features, labels, sched, unlabelled.features, truth, log_path)


def train_clustering(unlabelled, model, sched: TrainSchedule, truth=None, log_path=None) -> TrainResult:
    """BCE plus consistency on unlabelled data alone; clusters are argmax of the unlabelled head."""
    _check_heads(model, None, unlabelled)
    return _run("clustering", model, unlabelled.features, None, sched, unlabelled.features, truth, log_path)


def run_discovery(labelled, unlabelled, n_novel: int, sched: TrainSchedule, mode: str = "joint", warmup_epochs: int = 30, hidden: int = 64, identity_trunk: bool = False, truth=None, log_path=None) -> TrainResult:
    """Full pipeline: fresh model, supervised warm-up on the labelled set, then joint or incremental training."""
    if mode not in ("joint", "incremental"):
        raise ValueError(f"unknown mode {mode!r}")
    if labelled.labels is None or labelled.n == 0:
        raise TrainingError("labelled set needs class labels")
    n_labelled = int(labelled.labels.max()) + 1
    model = init_model(labelled.dim, hidden, n_labelled, n_novel, seed=sched.seed, identity_trunk=identity_trunk)
    warm = TrainSchedule(
        epochs=warmup_epochs, batch_size=sched.batch_size, lr=sched.lr, lr_decay=(),
        momentum=sched.momentum, seed=sched.seed,
    )
    model = train_supervised(labelled, model, warm)
    if mode == "joint":
        return train_joint(labelled, unlabelled, model, sched, truth=truth, log_path=log_path)
    model = extend_incremental(model, seed=sched.seed)
    return train_incremental(labelled, unlabelled, model, sched, truth=truth, log_path=log_path)
