import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sibling_fcn import autodiff as ad
from sibling_fcn.autodiff import Tensor
from sibling_fcn.model import ModelConfig, Parameters, build, forward
from sibling_fcn.objective import (
    ObjectiveConfig,
    auto_alpha,
    auto_gamma,
    classification_loss,
    combine_opi,
    detection_loss,
    joint_loss,
    objectness_gate,
    sibling_objective,
    weight_decay,
)

from conftest import fd_check


def probs(*channels):
    return Tensor(np.array(channels, dtype=float).reshape(len(channels), 1, 1))


# ---------------------------------------------------------------- combine


def test_combine_zero_objectness_annihilates():
    out = combine_opi(Tensor(np.zeros((1, 1))), probs(0.1, 0.2, 0.3, 0.25, 0.15))
    assert not out.data.any()


def test_combine_unit_objectness_is_identity():
    cond = probs(0.1, 0.2, 0.3, 0.25, 0.15)
    out = combine_opi(Tensor(np.ones((1, 1))), cond)
    np.testing.assert_array_equal(out.data, cond.data)


def test_combine_half_objectness_uniform_conditional():
    out = combine_opi(Tensor(np.full((1, 1), 0.5)), probs(*[0.2] * 5))
    np.testing.assert_allclose(out.data.ravel(), 0.1, rtol=1e-15)
    assert math.isclose(out.data.sum(), 0.5, rel_tol=1e-15)


def test_combine_shape_mismatch():
    with pytest.raises(ValueError):
        combine_opi(Tensor(np.ones((2, 2))), Tensor(np.ones((5, 3, 3)) / 5))


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), arrays(np.float64, (2, 4, 4), elements=st.floats(-30, 30)),
       arrays(np.float64, (4, 4), elements=st.floats(0, 1)))
def test_channel_sum_equals_objectness(k, seed_logits, p_obj):
    logits = np.concatenate([seed_logits] * ((k + 2) // 2))[: k + 1]
    cond = ad.softmax_channels(Tensor(logits))
    out = combine_opi(Tensor(p_obj), cond)
    np.testing.assert_allclose(out.data.sum(axis=0), p_obj, atol=1e-9)


# -------------------------------------------------------------- detection


def test_detection_loss_perfect():
    assert detection_loss(probs(0.0, 1.0), np.ones((1, 1)), alpha=2.0).item() == 0.0


def test_detection_loss_single_background_pixel():
    assert math.isclose(detection_loss(probs(0.5, 0.5), np.zeros((1, 1)), 1.0).item(), -math.log(0.5))
    assert math.isclose(-math.log(0.5), 0.693147, abs_tol=1e-6)


def test_detection_loss_two_pixels_by_hand():
    det = Tensor(np.array([[[0.8, 0.3]], [[0.2, 0.7]]]))  # (2, 1, 2): p_bkg row, p_obj row
    value = detection_loss(det, np.array([[0, 1]]), alpha=1.0).item()
    expected = -(math.log(0.8) + math.log(0.7)) / 2
    assert math.isclose(value, expected, rel_tol=1e-14)
    assert math.isclose(expected, 0.289909, abs_tol=1e-6)


def test_detection_alpha_weights_positives_only():
    det = Tensor(np.array([[[0.8, 0.3]], [[0.2, 0.7]]]))
    value = detection_loss(det, np.array([[0, 1]]), alpha=3.0).item()
    assert math.isclose(value, -(math.log(0.8) + 3 * math.log(0.7)) / 2, rel_tol=1e-14)


# --------------------------------------------------------- classification


def test_classification_gate_closed():
    p_obj = np.full((3, 3), 0.5)
    gate = objectness_gate(p_obj, 0.8)
    p_cls = combine_opi(Tensor(p_obj), Tensor(np.full((5, 3, 3), 0.2)))
    loss, n_cls = classification_loss(p_cls, gate, np.ones((3, 3)), np.ones(5))
    assert loss.item() == 0.0 and n_cls == 0


def test_classification_one_open_pixel_by_hand():
    p_obj = np.array([[0.9]])
    cond = probs(0.1, 0.2, 0.5, 0.1, 0.1)
    p_cls = combine_opi(Tensor(p_obj), cond)
    loss, n_cls = classification_loss(p_cls, objectness_gate(p_obj, 0.8), np.array([[2]]), np.ones(5))
    assert n_cls == 1
    assert math.isclose(loss.item(), -math.log(0.9 * 0.5), rel_tol=1e-14)
    assert math.isclose(loss.item(), 0.798508, abs_tol=1e-6)


def test_background_pixel_through_gate_uses_gamma0():
    p_obj = np.array([[0.95]])
    cond = probs(0.3, 0.7)
    p_cls = combine_opi(Tensor(p_obj), cond)
    loss, _ = classification_loss(p_cls, objectness_gate(p_obj, 0.8), np.array([[0]]), [2.5, 1.0])
    assert math.isclose(loss.item(), -2.5 * math.log(0.95 * 0.3), rel_tol=1e-14)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.floats(0.01, 0.98), st.floats(0.0, 0.5))
def test_raising_threshold_never_adds_pixels(p_obj, t1, dt):
    t2 = min(t1 + dt, 0.99)
    assert objectness_gate(p_obj, t2).sum() <= objectness_gate(p_obj, t1).sum()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 4, 4), elements=st.floats(1e-6, 1.0)))
def test_clamp_is_inert_above_1e_minus_6(p):
    t = Tensor(p)
    np.testing.assert_array_equal(ad.log_clamped(t).data, np.log(p))


# ------------------------------------------------------------- joint / FD


def test_joint_lambda_zero_and_beta_zero(rng):
    params = build(ModelConfig.desk(image_height=8, image_width=8, base_channels=2, blocks_per_module=1,
                                    scale_preset="custom"), 0)
    out = forward(params, rng.random((2, 3, 8, 8)))
    det_mask = (rng.random((2, 8, 8)) < 0.2).astype(int)
    cls_mask = det_mask * rng.integers(1, 5, (2, 8, 8))
    rep = sibling_objective(out, det_mask, cls_mask, params, ObjectiveConfig(t_p=0.3, lam=0.0), 2.0, np.ones(5))
    assert rep.loss_total == rep.loss_det + rep.loss_decay
    assert rep.loss_cls >= 0 and rep.loss_det >= 0 and rep.loss_decay >= 0
    assert abs(rep.loss_total - (rep.loss_det + 0.0 * rep.loss_cls + rep.loss_decay)) <= 1e-12

    out = forward(params, rng.random((2, 3, 8, 8)))
    rep = sibling_objective(out, det_mask, cls_mask, params, ObjectiveConfig(t_p=0.3, lam=0.7, beta=0.0),
                            2.0, np.ones(5))
    assert rep.loss_decay == 0.0
    assert abs(rep.loss_total - (rep.loss_det + 0.7 * rep.loss_cls + rep.loss_decay)) <= 1e-12
    assert rep.n_cls <= rep.n


def test_decay_of_zero_parameters_is_zero():
    p = {"a.w": Tensor(np.zeros((2, 2)), requires_grad=True)}
    assert weight_decay(p, ["a.w"]).item() == 0.0


def _micro_params(rng):
    """A 30-parameter two-head network: shared 1x1 conv, two 1x1 heads."""
    t = {
        "shared.w": rng.standard_normal((3, 2, 1, 1)),
        "shared.b": rng.standard_normal(3) * 0.1,
        "det.w": rng.standard_normal((2, 3, 1, 1)),
        "det.b": rng.standard_normal(2) * 0.1,
        "cls.w": rng.standard_normal((3, 3, 1, 1)),
        "cls.b": rng.standard_normal(3) * 0.1,
        "cls.bn.scale": rng.uniform(0.5, 1.5, 3),
        "cls.bn.shift": rng.standard_normal(3) * 0.1,
    }
    return {k: Tensor(v, requires_grad=True) for k, v in t.items()}


def _micro_forward(p, x):
    h = ad.relu(ad.conv2d(x, p["shared.w"], p["shared.b"]))
    det = ad.softmax_channels(ad.conv2d(h, p["det.w"], p["det.b"]))
    c = ad.conv2d(h, p["cls.w"], p["cls.b"])
    c = ad.batch_norm(c, p["cls.bn.scale"], p["cls.bn.shift"], np.zeros(3), np.ones(3), training=True,
                      update_stats=False)
    return det, ad.softmax_channels(c)


def _gap_threshold(values):
    v = np.sort(values.ravel())
    i = int(np.argmax(np.diff(v)))
    assert v[i + 1] - v[i] > 1e-3
    return (v[i] + v[i + 1]) / 2


def test_micro_network_joint_loss_matches_fd(rng):
    p = _micro_params(rng)
    assert sum(t.size for t in p.values()) <= 50
    x = Tensor(rng.standard_normal((2, 2, 3, 3)))
    det_mask = np.array([[[0, 1, 0], [1, 1, 0], [0, 0, 0]], [[0, 0, 1], [0, 1, 1], [0, 0, 0]]])
    cls_mask = det_mask * np.array([[[1, 2, 1], [2, 1, 2], [1, 1, 1]]] * 2)
    det, _ = _micro_forward(p, x)
    t_p = _gap_threshold(det.data[:, 1])
    cfg = ObjectiveConfig(t_p=t_p, lam=0.8, beta=0.01)
    gamma = np.array([0.5, 1.5, 2.0])

    class Out:
        pass

    def loss():
        o = Out()
        o.det_probs, o.cls_cond_probs = _micro_forward(p, x)
        return sibling_objective(o, det_mask, cls_mask, p_with_decay(p), cfg, 2.5, gamma).total

    def p_with_decay(p):
        class P(dict):
            def decayed_names(self):
                return [n for n in self if n.endswith(".w")]
        return P(p)

    det, _ = _micro_forward(p, x)
    assert objectness_gate(det.data[:, 1], t_p).any()
    assert fd_check(loss, list(p.values()), points=50) < 1e-4


def test_full_architecture_joint_loss_matches_fd(rng):
    cfg = ModelConfig(image_height=8, image_width=8, base_channels=2, blocks_per_module=1,
                      num_categories=2, scale_preset="custom")
    params = build(cfg, 7)
    x = rng.random((2, 3, 8, 8))
    det_mask = (rng.random((2, 8, 8)) < 0.3).astype(int)
    cls_mask = det_mask * rng.integers(1, 3, (2, 8, 8))
    t_p = _gap_threshold(forward(params, x).det_probs.data[:, 1])
    obj = ObjectiveConfig(t_p=t_p, lam=1.3, beta=1e-3)

    def loss():
        out = forward(params, x, mode="train", frozen=set(params.names()))
        return sibling_objective(out, det_mask, cls_mask, params, obj, 3.0, np.array([0.4, 1.0, 2.0])).total

    assert objectness_gate(forward(params, x).det_probs.data[:, 1], t_p).any()
    assert fd_check(loss, list(params.tensors.values()), points=10) < 1e-4


# ---------------------------------------------------- cross-branch gradient


def _cls_only_det_grads(t_p, lam, rng):
    cfg = ModelConfig(image_height=8, image_width=8, base_channels=2, blocks_per_module=1,
                      num_categories=2, scale_preset="custom")
    params = build(cfg, 11)
    x = rng.random((2, 3, 8, 8))
    det_mask = (rng.random((2, 8, 8)) < 0.4).astype(int)
    cls_mask = det_mask * 2
    out = forward(params, x, frozen=set(params.names()))
    rep = sibling_objective(out, det_mask, cls_mask, params, ObjectiveConfig(t_p=t_p, lam=lam, beta=0.0),
                            1.0, np.ones(3), with_det=False)
    ad.backprop(rep.total)
    grads = [params[n].grad for n in params if n.startswith("det.")]
    return rep, grads


def test_cross_branch_gradient_when_gate_open(rng):
    rep, grads = _cls_only_det_grads(0.01, 1.0, rng)
    assert rep.n_cls > 0
    assert any(g is not None and np.abs(g).max() > 0 for g in grads)


@pytest.mark.parametrize("t_p,lam", [(0.999, 1.0), (0.01, 0.0)])
def test_cross_branch_gradient_exactly_zero_otherwise(rng, t_p, lam):
    rep, grads = _cls_only_det_grads(t_p, lam, rng)
    for g in grads:
        assert g is None or not g.any()


# ---------------------------------------------------------------- weights


def test_auto_alpha_examples():
    half = np.array([0, 1] * 50)
    assert auto_alpha([half]) == 1.0
    assert auto_alpha([np.array([0] * 90 + [1] * 10)]) == 9.0
    assert auto_alpha([np.zeros(1000)]) == 100.0
    assert auto_alpha([np.ones(50)]) == 0.1


def test_auto_gamma_examples():
    np.testing.assert_array_equal(auto_gamma([np.repeat(np.arange(5), 7)], 4), np.ones(5))
    g = auto_gamma([np.array([0] * 80 + [1] * 10 + [2] * 10)], 2)
    np.testing.assert_allclose(g, [100 / (3 * 80), 100 / 30, 100 / 30])
    assert auto_gamma([np.zeros(100, dtype=int)], 2)[1] == 100 / 3
