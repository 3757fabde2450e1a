"""Objective terms and their analytic gradients.

``ce_loss`` returns its gradient at the logit level; ``bce_loss`` and
``mse_consistency`` return gradients with respect to the probability
vectors, which :func:`softmax_backward` maps to the logits.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .model import DualHeadModel, Forward, backward, forward_batch
from .pseudolabel import PseudoLabelMatrix

EPS = 1e-7
MODES = ("joint", "clustering", "incremental")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class RampSchedule:
    weight: float = 5.0
    length: float = 50.0

    def __post_init__(self):
        if self.weight < 0:
            raise LossError("ramp weight must be >= 0")
        if self.length < 1:
            raise LossError("ramp length must be >= 1")


@dataclass
class LossReport:
    ce: float = 0.0
    bce: float = 0.0
    mse: float = 0.0
    omega: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def rampup(r: float, sched: RampSchedule) -> float:
    """Sigmoid-shaped ramp ``w * exp(-5 (1 - r/T)^2)``, held at ``w`` once ``r >= T``."""
    if r < 0:
        raise LossError("ramp position must be >= 0")
    if r >= sched.length:
        return float(sched.weight)
    return float(sched.weight * math.exp(-5.0 * (1.0 - r / sched.length) ** 2))


def softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    """Map a gradient w.r.t. softmax outputs to one w.r.t. the logits."""
    return p * (grad_p - np.sum(grad_p * p, axis=-1, keepdims=True))


def ce_loss(p: np.ndarray, y) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the logits."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n, c = p.shape
    if y.shape != (n,):
        raise LossError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= c):
        raise LossError(f"labels must lie in [0, {c})")
    picked = p[np.arange(n), y]
    loss = float(-np.mean(np.log(np.maximum(picked, np.finfo(float).tiny))))
    grad = p.copy()
    grad[np.arange(n), y] -= 1.0
    return loss, grad / n


def bce_loss(p_u: np.ndarray, s) -> tuple[float, np.ndarray]:
    """Pairwise BCE over all ordered pairs (diagonal included), inner products clamped to [EPS, 1-EPS]."""
    p_u = np.asarray(p_u, dtype=np.float64)
    s = s.values if isinstance(s, PseudoLabelMatrix) else np.asarray(s, dtype=np.float64)
    m = p_u.shape[0]
    if s.shape != (m, m):
        raise LossError(f"pseudo-label matrix shape {s.shape} does not match batch of {m}")
    sigma = p_u @ p_u.T
    clamped = np.clip(sigma, EPS, 1.0 - EPS)
    inside = (sigma >= EPS) & (sigma <= 1.0 - EPS)
    terms = s * np.log(clamped) + (1.0 - s) * np.log(1.0 - clamped)
    loss = float(-terms.sum() / m**2)
    d_sigma = -(s / clamped - (1.0 - s) / (1.0 - clamped)) / m**2
    d_sigma = np.where(inside, d_sigma, 0.0)
    grad = (d_sigma + d_sigma.T) @ p_u
    return loss, grad


def mse_consistency(p: np.ndarray, p_hat: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean squared distance between paired predictions, with gradients for both arguments."""
    p = np.asarray(p, dtype=np.float64)
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if p.shape != p_hat.shape:
        raise LossError(f"shape mismatch {p.shape} vs {p_hat.shape}")
    n = p.shape[0]
    if n == 0:
        return 0.0, np.zeros_like(p), np.zeros_like(p_hat)
    diff = p - p_hat
    loss = float(np.sum(diff * diff) / n)
    grad = 2.0 * diff / n
    return loss, grad, -grad


def total_loss(
    model: DualHeadModel,
    x1,
    x2,
    labels=None,
    r: float = 0.0,
    mode: str = "joint",
    s=None,
    labeler=None,
    ramp: RampSchedule = RampSchedule(),
    incremental_ce: RampSchedule = RampSchedule(0.05, 50.0),
    use_bce: bool = True,
    use_mse: bool = True,
    pseudo_targets=None,
    forwards: tuple[Forward, Forward] | None = None,
):
    """Loss and gradients for one batch seen through two augmented views.

    Points with ``labels >= 0`` feed the labelled head's CE term; the rest
    feed the pairwise BCE term through ``s`` (or ``labeler(z)`` computed on
    the first view's trunk output). ``clustering`` mode never reads
    ``labels``. In ``incremental`` mode unlabelled points also contribute CE
    towards ``argmax`` of the unlabelled head (offset past the known
    classes), weighted by ``rampup(r, incremental_ce)``.

    Returns ``(LossReport, grads, info)`` where ``info`` holds the
    pseudo-label matrix and incremental targets actually used.
    """
    if mode not in MODES:
        raise LossError(f"unknown mode {mode!r}")
    fw1, fw2 = forwards if forwards is not None else (forward_batch(model, x1), forward_batch(model, x2))
    n = fw1.x.shape[0]
    if mode == "clustering":
        lab = np.zeros(n, dtype=bool)
    else:
        if labels is None:
            raise LossError(f"{mode} mode needs labels (-1 marks unlabelled points)")
        labels = np.asarray(labels, dtype=np.int64)
        lab = labels >= 0
    unl = ~lab
    if mode == "incremental" and not model.extended:
        raise LossError("incremental mode needs a model with an extended labelled head")

    report = LossReport(omega=rampup(r, ramp))
    dl1 = np.zeros_like(fw1.logits_l)
    dl2 = np.zeros_like(fw2.logits_l)
    du1 = np.zeros_like(fw1.logits_u)
    du2 = np.zeros_like(fw2.logits_u)
    info = {"s": None, "pseudo_targets": None}

    if mode != "clustering" and lab.any():
        ce, g = ce_loss(fw1.p_l[lab], labels[lab])
        report.ce += ce
        dl1[lab] += g
    if mode == "incremental" and unl.any():
        if pseudo_targets is None:
            pseudo_targets = model.n_labelled + np.argmax(fw1.p_u[unl], axis=1)
        weight = rampup(r, incremental_ce)
        ce, g = ce_loss(fw1.p_l[unl], pseudo_targets)
        report.ce += weight * ce
        dl1[unl] += weight * g
        info["pseudo_targets"] = np.asarray(pseudo_targets)

    if use_bce and unl.any():
        if s is None:
            if labeler is None:
                raise LossError("BCE needs a pseudo-label matrix or a labeler")
            s = labeler(fw1.z[unl])
        bce, gp = bce_loss(fw1.p_u[unl], s)
        report.bce = bce
        du1[unl] += softmax_backward(fw1.p_u[unl], gp)
        info["s"] = s

    if use_mse:
        w = report.omega
        if lab.any():
            m, g1, g2 = mse_consistency(fw1.p_l[lab], fw2.p_l[lab])
            report.mse += m
            dl1[lab] += w * softmax_backward(fw1.p_l[lab], g1)
            dl2[lab] += w * softmax_backward(fw2.p_l[lab], g2)
        if unl.any():
            m, g1, g2 = mse_consistency(fw1.p_u[unl], fw2.p_u[unl])
            report.mse += m
            du1[unl] += w * softmax_backward(fw1.p_u[unl], g1)
            du2[unl] += w * softmax_backward(fw2.p_u[unl], g2)

    report.total = report.ce + report.bce + report.omega * report.mse
    head_l_active = mode != "clustering"
    grads = backward(model, fw1, dl1 if head_l_active else None, du1)
    grads = backward(model, fw2, dl2 if head_l_active else None, du2, grads)
    return report, grads, info
