import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from novelkit.losses import (
    EPS,
    LossError,
    RampSchedule,
    bce_loss,
    ce_loss,
    mse_consistency,
    rampup,
    softmax_backward,
    total_loss,
)
from novelkit.model import extend_incremental, forward_batch, init_model, softmax
from novelkit.pseudolabel import LabelerConfig, make_labels

from test_model import _scalar_fd, rel_err


class TestCrossEntropy:
    def test_closed_form(self):
        p = np.array([[0.7, 0.2, 0.1], [0.25, 0.25, 0.5]])
        loss, _ = ce_loss(p, [0, 2])
        assert math.isclose(loss, -(math.log(0.7) + math.log(0.5)) / 2, rel_tol=1e-14)

    def test_logit_gradient(self):
        logits = np.random.default_rng(0).normal(size=(5, 4))
        y = np.array([0, 3, 1, 1, 2])
        _, g = ce_loss(softmax(logits), y)
        fd = _scalar_fd(lambda: ce_loss(softmax(logits), y)[0], logits)
        assert rel_err(g, fd) < 1e-7

    def test_bad_labels(self):
        with pytest.raises(LossError):
            ce_loss(np.full((2, 3), 1 / 3), [0, 3])


class TestBce:
    def test_closed_form(self):
        p = np.array([[0.8, 0.2], [0.6, 0.4]])
        s = np.array([[1.0, 0.0], [0.0, 1.0]])
        sigma = p @ p.T
        expected = -(
            math.log(sigma[0, 0]) + math.log(sigma[1, 1]) + 2 * math.log(1 - sigma[0, 1])
        ) / 4
        assert math.isclose(bce_loss(p, s)[0], expected, rel_tol=1e-14)

    def test_clamp_keeps_loss_finite(self):
        p = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, grad = bce_loss(p, np.ones((2, 2)))
        assert math.isclose(loss, -2 * math.log(EPS) / 4 - 2 * math.log(1 - EPS) / 4, rel_tol=1e-12)
        assert np.all(np.isfinite(grad))

    def test_probability_gradient(self):
        rng = np.random.default_rng(1)
        p = softmax(rng.normal(size=(6, 3)))
        s = make_labels(rng.normal(size=(6, 5)), LabelerConfig(k=2)).values
        _, g = bce_loss(p, s)
        fd = _scalar_fd(lambda: bce_loss(p, s)[0], p)
        assert rel_err(g, fd) < 1e-7

    def test_shape_mismatch(self):
        with pytest.raises(LossError):
            bce_loss(np.full((3, 2), 0.5), np.ones((2, 2)))


class TestMse:
    def test_closed_form_and_gradients(self):
        p = np.array([[0.5, 0.5], [1.0, 0.0]])
        q = np.array([[0.25, 0.75], [0.0, 1.0]])
        loss, gp, gq = mse_consistency(p, q)
        assert loss == (0.125 + 2.0) / 2
        np.testing.assert_array_equal(gp, -gq)
        fd = _scalar_fd(lambda: mse_consistency(p, q)[0], p)
        assert rel_err(gp, fd) < 1e-8

    def test_empty(self):
        assert mse_consistency(np.zeros((0, 3)), np.zeros((0, 3)))[0] == 0.0


def test_softmax_backward_chain_rule():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 5))
    w = rng.normal(size=(4, 5))
    g = softmax_backward(softmax(logits), w)
    fd = _scalar_fd(lambda: float(np.sum(w * softmax(logits))), logits)
    assert rel_err(g, fd) < 1e-7


class TestRamp:
    def test_values(self):
        sched = RampSchedule(5.0, 50.0)
        assert math.isclose(rampup(0, sched), 5 * math.exp(-5))
        assert math.isclose(rampup(25, sched), 5 * math.exp(-1.25))
        assert rampup(50, sched) == 5.0 and rampup(500, sched) == 5.0

    @settings(max_examples=200, deadline=None)
    @given(a=st.floats(0, 200), b=st.floats(0, 200), w=st.floats(0, 100), t=st.floats(1, 100))
    def test_monotone_and_bounded(self, a, b, w, t):
        sched = RampSchedule(w, t)
        lo, hi = sorted((a, b))
        assert 0 <= rampup(lo, sched) <= rampup(hi, sched) <= w

    def test_negative_position(self):
        with pytest.raises(LossError):
            rampup(-1, RampSchedule())


def _setup(seed=0, extended=False, identity=False):
    rng = np.random.default_rng(seed)
    model = init_model(8, 12, 3, 4, seed=seed, identity_trunk=identity)
    for v in model.params.values():
        v += rng.normal(scale=0.3, size=v.shape)
    if extended:
        model = extend_incremental(model, seed=seed)
    x1 = rng.normal(size=(10, 8))
    x2 = x1 + rng.normal(scale=0.2, size=x1.shape)
    labels = np.array([0, 1, 2, 0, 1, -1, -1, -1, -1, -1])
    return model, x1, x2, labels


class TestTotalLoss:
    @pytest.mark.parametrize("mode", ["joint", "clustering", "incremental"])
    @pytest.mark.parametrize("identity", [False, True])
    def test_gradient_matches_finite_differences(self, mode, identity):
        model, x1, x2, labels = _setup(3, extended=mode == "incremental", identity=identity)
        unl = labels < 0 if mode != "clustering" else np.ones(10, dtype=bool)
        cfg = LabelerConfig(k=2)
        # freeze the pseudo-labels and incremental targets at the current parameters
        s = make_labels(forward_batch(model, x1).z[unl], cfg).values
        targets = model.n_labelled + np.argmax(forward_batch(model, x1).p_u[unl], axis=1)
        kw = dict(labels=labels, r=20, mode=mode, s=s, pseudo_targets=targets if mode == "incremental" else None)
        report, grads, _ = total_loss(model, x1, x2, **kw)
        for name, value in model.params.items():
            fd = _scalar_fd(lambda: total_loss(model, x1, x2, **kw)[0].total, value)
            if mode == "clustering" and name.startswith("head_l"):
                assert not grads[name].any() and not fd.any()
                continue
            assert rel_err(grads[name], fd) < 1e-5, name

    def test_total_combines_terms(self):
        model, x1, x2, labels = _setup(1)
        report, _, _ = total_loss(model, x1, x2, labels=labels, r=10, labeler=lambda z: make_labels(z, LabelerConfig()))
        assert report.ce > 0 and report.bce > 0 and report.mse > 0
        assert math.isclose(report.total, report.ce + report.bce + report.omega * report.mse)
        assert math.isclose(report.omega, rampup(10, RampSchedule()))

    def test_mse_split_by_head(self):
        model, x1, x2, labels = _setup(2)
        s = np.eye(5)
        report, _, _ = total_loss(model, x1, x2, labels=labels, s=s, use_bce=False)
        f1, f2 = forward_batch(model, x1), forward_batch(model, x2)
        lab = labels >= 0
        expected = np.sum((f1.p_l[lab] - f2.p_l[lab]) ** 2) / 5 + np.sum((f1.p_u[~lab] - f2.p_u[~lab]) ** 2) / 5
        assert math.isclose(report.mse, expected, rel_tol=1e-12)

    def test_ablation_flags(self):
        model, x1, x2, labels = _setup(4)
        report, grads, info = total_loss(model, x1, x2, labels=labels, use_bce=False, use_mse=False)
        assert report.bce == 0 and report.mse == 0 and info["s"] is None
        assert not grads["head_u.W"].any()

    def test_clustering_ignores_labels(self):
        model, x1, x2, labels = _setup(5)
        s = np.ones((10, 10))
        a = total_loss(model, x1, x2, labels=labels, mode="clustering", s=s)
        b = total_loss(model, x1, x2, labels=None, mode="clustering", s=s)
        assert a[0] == b[0]
        assert a[0].ce == 0.0

    def test_incremental_targets_offset(self):
        model, x1, x2, labels = _setup(6, extended=True)
        _, _, info = total_loss(model, x1, x2, labels=labels, mode="incremental", s=np.eye(5))
        expected = 3 + np.argmax(forward_batch(model, x1[5:]).p_u, axis=1)
        np.testing.assert_array_equal(info["pseudo_targets"], expected)

    def test_incremental_needs_extension(self):
        model, x1, x2, labels = _setup(7)
        with pytest.raises(LossError):
            total_loss(model, x1, x2, labels=labels, mode="incremental", s=np.eye(5))

    def test_joint_needs_labels(self):
        model, x1, x2, _ = _setup(8)
        with pytest.raises(LossError):
            total_loss(model, x1, x2, labels=None, s=np.eye(10))
