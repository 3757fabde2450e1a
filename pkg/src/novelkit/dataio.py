"""Embedding datasets: file formats, synthetic mixtures and probe splits."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

UNLABELLED = -1
MAGIC = b"NVK1"
_HEADER = struct.Struct("<4sQQB")
MAX_PLACEMENT_RETRIES = 1000


class DatasetError(ValueError):
    """Raised when a dataset file or in-memory dataset violates its contract."""


@dataclass(frozen=True)
class EmbeddingDataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    n_labelled_classes: int | None = None
    n_unlabelled_classes: int | None = None

    def __post_init__(self):
        feats = np.ascontiguousarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[1] < 1:
            raise DatasetError(f"features must be an n x d matrix with d >= 1, got shape {feats.shape}")
        object.__setattr__(self, "features", feats)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (feats.shape[0],):
                raise DatasetError(f"expected {feats.shape[0]} labels, got shape {labels.shape}")
            labels = labels.astype(np.int64)
            if np.any(labels < UNLABELLED):
                row = int(np.argmax(labels < UNLABELLED))
                raise DatasetError(f"row {row}: label {labels[row]} is negative but not -1")
            if self.n_labelled_classes is not None and self.n_unlabelled_classes is not None:
                bound = self.n_labelled_classes + self.n_unlabelled_classes
                if np.any(labels >= bound):
                    row = int(np.argmax(labels >= bound))
                    raise DatasetError(f"row {row}: label {labels[row]} out of range [0, {bound})")
            object.__setattr__(self, "labels", labels)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def has_labels(self) -> bool:
        return self.labels is not None

    def labelled_mask(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(self.n, dtype=bool)
        return self.labels != UNLABELLED

    def masked(self) -> "EmbeddingDataset":
        """Copy with every label hidden (-1); features are shared."""
        return replace(self, labels=np.full(self.n, UNLABELLED, dtype=np.int64))

    def stripped(self) -> "EmbeddingDataset":
        return replace(self, labels=None)

    def subset(self, index) -> "EmbeddingDataset":
        labels = None if self.labels is None else self.labels[index]
        return replace(self, features=self.features[index], labels=labels)

    def classes(self) -> np.ndarray:
        if self.labels is None:
            return np.zeros(0, dtype=np.int64)
        return np.unique(self.labels[self.labels != UNLABELLED])


@dataclass(frozen=True)
class ProbeSplit:
    train_classes: tuple[int, ...]
    anchor_probe: tuple[int, ...]
    validation_probe: tuple[int, ...]

    @property
    def probe_classes(self) -> tuple[int, ...]:
        """Anchor classes first, then validation classes (slot order used by clustering)."""
        return self.anchor_probe + self.validation_probe


@dataclass(frozen=True)
class MixtureSpec:
    n_labelled_classes: int
    n_unlabelled_classes: int
    points_per_class: int = 200
    dim: int = 16
    cluster_std: float = 1.0
    separation: float = 8.0
    seed: int = 0


# -- file formats ---------------------------------------------------------


def _infer_format(path: Path) -> str:
    return "bin" if path.suffix.lower() in (".bin", ".nvk") else "csv"


def load_dataset(path, fmt: str | None = None, n_labelled_classes=None, n_unlabelled_classes=None) -> EmbeddingDataset:
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if fmt == "csv":
        features, labels = _read_csv(path)
    elif fmt == "bin":
        with open(path, "rb") as fh:
            features, labels = read_bin_block(fh)
            if fh.read(1):
                raise DatasetError(f"{path}: trailing bytes after dataset block")
    else:
        raise DatasetError(f"unknown format {fmt!r}")
    if features.shape[0] == 0:
        raise DatasetError(f"{path}: dataset is empty")
    return EmbeddingDataset(features, labels, n_labelled_classes, n_unlabelled_classes)


def save_dataset(ds: EmbeddingDataset, path, fmt: str | None = None) -> None:
    path = Path(path)
    fmt = fmt or _infer_format(path)
    if fmt == "csv":
        _write_csv(ds, path)
    elif fmt == "bin":
        with open(path, "wb") as fh:
            write_bin_block(fh, ds.features, ds.labels)
    else:
        raise DatasetError(f"unknown format {fmt!r}")


def _read_csv(path: Path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetError(f"{path}: missing header")
    head = [tok.strip() for tok in lines[0].split(",")]
    if len(head) != 4 or head[0] != "d" or head[2] != "labels" or head[3] not in ("0", "1"):
        raise DatasetError(f"{path}: malformed header {lines[0]!r}; expected 'd,<int>,labels,<0|1>'")
    try:
        d = int(head[1])
    except ValueError:
        raise DatasetError(f"{path}: malformed header, dimension {head[1]!r} is not an integer") from None
    if d < 1:
        raise DatasetError(f"{path}: dimension must be >= 1")
    has_labels = head[3] == "1"
    width = d + 1 if has_labels else d
    rows, labels = [], []
    for lineno, line in enumerate(lines[1:], start=1):
        if not line.strip():
            continue
        toks = line.split(",")
        if len(toks) != width:
            raise DatasetError(f"{path}: row {lineno} has {len(toks)} fields, expected {width} (ragged row)")
        try:
            rows.append([float(t) for t in toks[:d]])
            if has_labels:
                labels.append(int(toks[d]))
        except ValueError as exc:
            raise DatasetError(f"{path}: row {lineno}: {exc}") from None
    features = np.array(rows, dtype=np.float64).reshape(len(rows), d)
    return features, (np.array(labels, dtype=np.int64) if has_labels else None)


def _write_csv(ds: EmbeddingDataset, path: Path) -> None:
    has_labels = ds.labels is not None
    out = [f"d,{ds.dim},labels,{int(has_labels)}"]
    for i, row in enumerate(ds.features):
        # repr() of a float round-trips exactly
        toks = [repr(float(v)) for v in row]
        if has_labels:
            toks.append(str(int(ds.labels[i])))
        out.append(",".join(toks))
    path.write_text("\n".join(out) + "\n")


def write_bin_block(fh, matrix: np.ndarray, labels: np.ndarray | None = None) -> int:
    """Write one NVK1 block; returns the number of bytes written."""
    matrix = np.ascontiguousarray(matrix, dtype="<f8")
    n, d = matrix.shape
    payload = _HEADER.pack(MAGIC, n, d, int(labels is not None)) + matrix.tobytes()
    if labels is not None:
        payload += np.ascontiguousarray(labels, dtype="<i8").tobytes()
    fh.write(payload)
    return len(payload)


def read_bin_block(fh):
    raw = fh.read(_HEADER.size)
    if len(raw) != _HEADER.size:
        raise DatasetError("truncated header")
    magic, n, d, has_labels = _HEADER.unpack(raw)
    if magic != MAGIC:
        raise DatasetError(f"bad magic {magic!r}")
    if has_labels not in (0, 1):
        raise DatasetError(f"bad has_labels byte {has_labels}")
    if d < 1:
        raise DatasetError("dimension must be >= 1")
    buf = fh.read(8 * n * d)
    if len(buf) != 8 * n * d:
        raise DatasetError("truncated feature block")
    features = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(n, d)
    labels = None
    if has_labels:
        buf = fh.read(8 * n)
        if len(buf) != 8 * n:
            raise DatasetError("truncated label block")
        labels = np.frombuffer(buf, dtype="<i8").astype(np.int64)
    return features, labels


# -- synthetic data ---------------------------------------------------------


def _place_means(n_means, dim, min_dist, rng):
    side = min_dist * max(2.0, 2.0 * n_means ** (1.0 / dim))
    means = []
    rejections = 0
    while len(means) < n_means:
        cand = rng.uniform(-side / 2, side / 2, size=dim)
        if all(np.linalg.norm(cand - m) >= min_dist for m in means):
            means.append(cand)
            continue
        rejections += 1
        if rejections > MAX_PLACEMENT_RETRIES:
            raise DatasetError(
                f"could not place {n_means} means at separation {min_dist:g} "
                f"within {MAX_PLACEMENT_RETRIES} retries"
            )
    return np.array(means)


def synth_mixture(spec: MixtureSpec):
    """Isotropic Gaussian mixture split into labelled, unlabelled and test sets.

    Class ids ``0..C^l-1`` are the known classes and ``C^l..C^l+C^u-1`` the
    novel ones. The unlabelled split keeps its ground truth in ``labels``;
    call :meth:`EmbeddingDataset.masked` before handing it to training code.
    The test split holds ``points_per_class`` fresh points of every class.
    """
    cl, cu = spec.n_labelled_classes, spec.n_unlabelled_classes
    if min(cl, cu, spec.points_per_class, spec.dim) < 1:
        raise DatasetError("class counts, points_per_class and dim must all be >= 1")
    if not spec.separation > 0 or not spec.cluster_std > 0:
        raise DatasetError("separation and cluster_std must be positive")
    rng = np.random.default_rng(spec.seed)
    means = _place_means(cl + cu, spec.dim, spec.separation * spec.cluster_std, rng)
    ppc = spec.points_per_class

    def draw(classes):
        labels = np.repeat(np.asarray(classes, dtype=np.int64), ppc)
        noise = rng.normal(0.0, spec.cluster_std, size=(labels.size, spec.dim))
        return means[labels] + noise, labels

    known = range(cl)
    novel = range(cl, cl + cu)
    x_l, y_l = draw(known)
    x_u, y_u = draw(novel)
    x_t, y_t = draw(range(cl + cu))
    make = lambda x, y: EmbeddingDataset(x, y, cl, cu)
    return make(x_l, y_l), make(x_u, y_u), make(x_t, y_t)


# -- probe split ------------------------------------------------------------


def split_probe(labelled: EmbeddingDataset, probe_class_count: int, anchor_ratio: float = 0.8, seed: int = 0) -> ProbeSplit:
    """Withhold ``probe_class_count`` labelled classes, split into anchor and validation probes.

    Probe classes are drawn uniformly at random under ``seed``.
    """
    classes = labelled.classes()
    if not 1 <= probe_class_count < classes.size:
        raise DatasetError(
            f"probe class count must be in [1, {classes.size}) so training classes remain, got {probe_class_count}"
        )
    if not 0.0 < anchor_ratio < 1.0:
        raise DatasetError(f"anchor_ratio must be in (0, 1), got {anchor_ratio}")
    n_anchor = int(math.floor(anchor_ratio * probe_class_count + 0.5))
    if n_anchor < 1 or probe_class_count - n_anchor < 1:
        raise DatasetError(
            f"{probe_class_count} probe classes at ratio {anchor_ratio} leave an empty anchor or validation set"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(classes)
    probe = order[:probe_class_count]
    train = np.sort(order[probe_class_count:])
    anchor = np.sort(probe[:n_anchor])
    valid = np.sort(probe[n_anchor:])
    as_tuple = lambda a: tuple(int(c) for c in a)
    return ProbeSplit(as_tuple(train), as_tuple(anchor), as_tuple(valid))
