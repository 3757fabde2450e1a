"""Trainable trunk with a labelled head and an unlabelled (clustering) head.

Parameters live in a flat ``{name: ndarray}`` dict so optimisers, gradient
checks and checkpoints can treat them uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import read_bin_block, write_bin_block


class ModelError(ValueError):
    pass


@dataclass
class DualHeadModel:
    d_in: int
    d_h: int
    n_labelled: int
    n_unlabelled: int
    params: dict[str, np.ndarray]
    identity_trunk: bool = False
    extended: bool = False

    @property
    def n_labelled_out(self) -> int:
        return self.params["head_l.W"].shape[0]

    def names(self) -> list[str]:
        return list(self.params)

    def copy(self) -> "DualHeadModel":
        return DualHeadModel(
            self.d_in, self.d_h, self.n_labelled, self.n_unlabelled,
            {k: v.copy() for k, v in self.params.items()}, self.identity_trunk, self.extended,
        )

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


@dataclass
class Forward:
    """Cached activations of one batched forward pass."""

    x: np.ndarray
    pre: np.ndarray | None
    z: np.ndarray
    logits_l: np.ndarray
    logits_u: np.ndarray
    p_l: np.ndarray = field(init=False)
    p_u: np.ndarray = field(init=False)

    def __post_init__(self):
        self.p_l = softmax(self.logits_l)
        self.p_u = softmax(self.logits_u)


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _uniform(rng, rows, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(rows, fan_in))


def init_model(d_in: int, d_h: int, n_labelled: int, n_unlabelled: int, seed: int = 0, identity_trunk: bool = False) -> DualHeadModel:
    if identity_trunk:
        d_h = d_in
    if min(d_in, d_h, n_labelled, n_unlabelled) < 1:
        raise ModelError("all model dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    params = {}
    if not identity_trunk:
        params["trunk.W"] = _uniform(rng, d_h, d_in)
        params["trunk.b"] = np.zeros(d_h)
    params["head_l.W"] = _uniform(rng, n_labelled, d_h)
    params["head_l.b"] = np.zeros(n_labelled)
    params["head_u.W"] = _uniform(rng, n_unlabelled, d_h)
    params["head_u.b"] = np.zeros(n_unlabelled)
    return DualHeadModel(d_in, d_h, n_labelled, n_unlabelled, params, identity_trunk)


def extend_incremental(model: DualHeadModel, seed: int = 0) -> DualHeadModel:
    """Grow the labelled head by ``n_unlabelled`` randomly initialised outputs.

    Existing rows are copied bit-exactly; returns a new model.
    """
    if model.extended:
        raise ModelError("model head is already extended")
    out = model.copy()
    rng = np.random.default_rng(seed)
    new_w = _uniform(rng, model.n_unlabelled, model.d_h)
    out.params["head_l.W"] = np.vstack([model.params["head_l.W"], new_w])
    out.params["head_l.b"] = np.concatenate([model.params["head_l.b"], np.zeros(model.n_unlabelled)])
    out.extended = True
    return out


def forward_batch(model: DualHeadModel, x) -> Forward:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.d_in:
        raise ModelError(f"expected inputs of width {model.d_in}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ModelError("non-finite input to forward pass")
    p = model.params
    if model.identity_trunk:
        pre, z = None, x
    else:
        pre = x @ p["trunk.W"].T + p["trunk.b"]
        z = np.maximum(pre, 0.0)
    logits_l = z @ p["head_l.W"].T + p["head_l.b"]
    logits_u = z @ p["head_u.W"].T + p["head_u.b"]
    return Forward(x, pre, z, logits_l, logits_u)


def forward(model: DualHeadModel, x) -> dict[str, np.ndarray]:
    """Single-vector forward pass returning ``z``, ``p_l`` and ``p_u``."""
    fw = forward_batch(model, np.asarray(x, dtype=np.float64)[None, :])
    return {"z": fw.z[0], "p_l": fw.p_l[0], "p_u": fw.p_u[0]}


def backward(model: DualHeadModel, fw: Forward, dlogits_l=None, dlogits_u=None, grads=None) -> dict[str, np.ndarray]:
    """Accumulate parameter gradients given gradients w.r.t. both heads' logits."""
    p = model.params
    grads = model.zeros_like() if grads is None else grads
    dz = np.zeros_like(fw.z)
    if dlogits_l is not None:
        grads["head_l.W"] += dlogits_l.T @ fw.z
        grads["head_l.b"] += dlogits_l.sum(axis=0)
        dz += dlogits_l @ p["head_l.W"]
    if dlogits_u is not None:
        grads["head_u.W"] += dlogits_u.T @ fw.z
        grads["head_u.b"] += dlogits_u.sum(axis=0)
        dz += dlogits_u @ p["head_u.W"]
    if not model.identity_trunk:
        dpre = dz * (fw.pre > 0)
        grads["trunk.W"] += dpre.T @ fw.x
        grads["trunk.b"] += dpre.sum(axis=0)
    return grads


def predict_unlabelled(model: DualHeadModel, x) -> np.ndarray:
    return np.argmax(forward_batch(model, x).p_u, axis=1)


def predict_labelled(model: DualHeadModel, x) -> np.ndarray:
    return np.argmax(forward_batch(model, x).p_l, axis=1)


# -- checkpoints ------------------------------------------------------------


def manifest_path(path) -> Path:
    return Path(path).with_suffix(".json")


def save_checkpoint(model: DualHeadModel, path) -> Path:
    """Write parameters as consecutive NVK1 blocks plus a JSON manifest next to them."""
    path = Path(path)
    tensors = []
    offset = 0
    with open(path, "wb") as fh:
        for name, value in model.params.items():
            shape = list(value.shape)
            size = write_bin_block(fh, value.reshape(value.shape[0], -1) if value.ndim == 2 else value[None, :])
            tensors.append({"name": name, "shape": shape, "offset": offset, "nbytes": size})
            offset += size
    manifest = {
        "format": "NVK1-tensors",
        "d_in": model.d_in,
        "d_h": model.d_h,
        "n_labelled": model.n_labelled,
        "n_unlabelled": model.n_unlabelled,
        "identity_trunk": model.identity_trunk,
        "extended": model.extended,
        "tensors": tensors,
    }
    mpath = manifest_path(path)
    mpath.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return mpath


def load_checkpoint(path) -> DualHeadModel:
    path = Path(path)
    mpath = manifest_path(path)
    if not mpath.exists():
        raise ModelError(f"checkpoint manifest {mpath} not found")
    manifest = json.loads(mpath.read_text())
    params = {}
    with open(path, "rb") as fh:
        for t in manifest["tensors"]:
            fh.seek(t["offset"])
            block, _ = read_bin_block(fh)
            params[t["name"]] = block.reshape(t["shape"]).copy()
    return DualHeadModel(
        manifest["d_in"], manifest["d_h"], manifest["n_labelled"], manifest["n_unlabelled"],
        params, manifest["identity_trunk"], manifest["extended"],
    )
