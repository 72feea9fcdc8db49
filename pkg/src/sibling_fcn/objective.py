"""Objectness-gated joint loss for the sibling heads.

``combine_opi`` multiplies the objectness map into the conditional class
map; the classification loss is evaluated on that product, so its gradient
reaches the detection branch as well as the classification branch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

WEIGHT_MIN, WEIGHT_MAX = 0.1, 100.0


@dataclass
class ObjectiveConfig:
    t_p: float = 0.8
    lam: float = 1.0
    beta: float = 1e-4
    alpha_mode: str = "auto"
    gamma_mode: str = "auto"
    alpha: float = 1.0
    gamma: Optional[Sequence[float]] = None

    def __post_init__(self):
        if not 0.0 < self.t_p < 1.0:
            raise ValueError("t_p must lie strictly between 0 and 1")
        if self.lam < 0 or self.beta < 0:
            raise ValueError("lambda and beta must be non-negative")
        for mode in (self.alpha_mode, self.gamma_mode):
            if mode not in ("fixed", "auto"):
                raise ValueError(f"weight mode must be 'fixed' or 'auto', got {mode!r}")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.gamma is not None and any(g <= 0 for g in self.gamma):
            raise ValueError("gamma entries must be positive")


@dataclass
class LossReport:
    loss_det: float
    loss_cls: float
    loss_decay: float
    loss_total: float
    n: int
    n_cls: int
    gate_closed: bool = False
    total: Optional[Tensor] = field(default=None, repr=False)


def _as_nchw(t: Tensor) -> Tensor:
    return ad.reshape(t, (1,) + t.shape) if t.data.ndim == 3 else t


def _as_map(t: Tensor) -> Tensor:
    """Promote an ``(H, W)`` or ``(B, H, W)`` objectness map to ``(B, 1, H, W)``."""
    if t.data.ndim == 2:
        return ad.reshape(t, (1, 1) + t.shape)
    if t.data.ndim == 3:
        return ad.reshape(t, (t.shape[0], 1) + t.shape[1:])
    return t


def combine_opi(p_obj: Tensor, p_cond: Tensor) -> Tensor:
    """``p_cls[k] = p_obj * p_cond[k]`` for every class including background."""
    cond = _as_nchw(p_cond)
    obj = _as_map(p_obj)
    if obj.shape[1] != 1 or obj.shape[0] != cond.shape[0] or obj.shape[2:] != cond.shape[2:]:
        raise ValueError(f"shape mismatch: objectness {p_obj.shape} vs conditional {p_cond.shape}")
    out = ad.mul(obj, cond)
    return ad.reshape(out, p_cond.shape) if p_cond.data.ndim == 3 else out


def detection_loss(det_probs: Tensor, det_mask: np.ndarray, alpha: float) -> Tensor:
    """Class-weighted binary log loss averaged over every pixel of the batch."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    probs = _as_nchw(det_probs)
    y = np.asarray(det_mask).reshape(probs.shape[0], *probs.shape[2:])
    weights = np.stack([(y == 0).astype(float), alpha * (y == 1)], axis=1)
    n = y.size
    return ad.scale(ad.weighted_sum(ad.log_clamped(probs), weights), -1.0 / n)


def classification_loss(
    p_cls: Tensor,
    gate: np.ndarray,
    cls_mask: np.ndarray,
    gamma: Sequence[float],
):
    """Gated, class-weighted log loss on ``p_cls``.

    ``gate`` is a constant boolean map. Returns ``(mean_loss, n_cls)``; the
    mean is over gate-passing pixels and is zero when the gate is closed.
    """
    probs = _as_nchw(p_cls)
    k1 = probs.shape[1]
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (k1,):
        raise ValueError(f"gamma must have {k1} entries, got {gamma.shape}")
    if np.any(gamma <= 0):
        raise ValueError("gamma entries must be positive")
    shape = (probs.shape[0],) + probs.shape[2:]
    c = np.asarray(cls_mask).reshape(shape).astype(int)
    g = np.asarray(gate).reshape(shape).astype(bool)
    n_cls = int(g.sum())
    if n_cls == 0:
        return ad.scale(ad.weighted_sum(probs, np.zeros(probs.shape)), 0.0), 0
    onehot = (c[:, None] == np.arange(k1)[None, :, None, None]).astype(float)
    weights = onehot * gamma[None, :, None, None] * g[:, None]
    return ad.scale(ad.weighted_sum(ad.log_clamped(probs), weights), -1.0 / n_cls), n_cls


def objectness_gate(p_obj: np.ndarray, t_p: float) -> np.ndarray:
    return np.asarray(p_obj) > t_p


def weight_decay(params, names) -> Tensor:
    terms = [ad.sum_squares(params[n]) for n in names]
    return ad.add_n(terms) if terms else Tensor(0.0)


def joint_loss(det_term: Tensor, cls_term: Tensor, decay_term: Tensor, config: ObjectiveConfig,
               n: int = 0, n_cls: int = 0) -> LossReport:
    """Assemble ``L_det + lambda * L_cls + beta * ||W||^2`` and report its parts."""
    decay = ad.scale(decay_term, config.beta)
    weighted_cls = ad.scale(cls_term, config.lam)
    total = ad.add_n([det_term, weighted_cls, decay])
    return LossReport(
        loss_det=det_term.item(),
        loss_cls=cls_term.item(),
        loss_decay=decay.item(),
        loss_total=total.item(),
        n=n,
        n_cls=n_cls,
        gate_closed=(n_cls == 0),
        total=total,
    )


def sibling_objective(outputs, det_mask, cls_mask, params, config: ObjectiveConfig,
                      alpha: float, gamma, gate_source: str = "objectness",
                      use_opi: bool = True, with_det: bool = True, with_cls: bool = True) -> LossReport:
    """Full objective for a sibling-head forward pass.

    ``gate_source`` selects which pixels enter the classification loss:
    ``"objectness"`` thresholds ``p_obj`` at ``t_p``; ``"ground_truth"`` uses
    the ground-truth disks instead. ``use_opi=False`` scores the conditional
    map directly rather than its product with ``p_obj``.
    """
    det_probs = outputs.det_probs
    b = det_probs.shape[0]
    n = int(np.asarray(det_mask).size)
    zero = ad.scale(ad.weighted_sum(det_probs, np.zeros(det_probs.shape)), 0.0)
    det_term = detection_loss(det_probs, det_mask, alpha) if with_det else zero

    cls_term, n_cls = zero, 0
    if with_cls:
        p_obj = ad.channel_slice(det_probs, 1, 2)
        if gate_source == "objectness":
            gate = objectness_gate(p_obj.data[:, 0], config.t_p)
        elif gate_source == "ground_truth":
            gate = np.asarray(det_mask).reshape(b, *det_probs.shape[2:]) == 1
        else:
            raise ValueError(f"unknown gate source {gate_source!r}")
        scored = combine_opi(p_obj, outputs.cls_cond_probs) if use_opi else outputs.cls_cond_probs
        cls_term, n_cls = classification_loss(scored, gate, cls_mask, gamma)

    decay_term = weight_decay(params, params.decayed_names())
    return joint_loss(det_term, cls_term, decay_term, config, n=n, n_cls=n_cls)


def five_class_objective(outputs, cls_mask, params, config: ObjectiveConfig, gamma) -> LossReport:
    """Weighted five-way log loss over every pixel for the single-head model."""
    probs = outputs.cls_cond_probs
    c = np.asarray(cls_mask).reshape(probs.shape[0], *probs.shape[2:])
    n = c.size
    gate = np.ones_like(c, dtype=bool)
    term, _ = classification_loss(probs, gate, c, gamma)
    zero = ad.scale(ad.weighted_sum(probs, np.zeros(probs.shape)), 0.0)
    decay_term = weight_decay(params, params.decayed_names())
    report = joint_loss(term, zero, decay_term, config, n=n, n_cls=0)
    report.gate_closed = False
    return report


def auto_alpha(det_masks) -> float:
    """Negative-to-positive pixel ratio, clamped to ``[0.1, 100]``."""
    y = np.concatenate([np.asarray(m).ravel() for m in det_masks])
    if y.size == 0:
        raise ValueError("auto_alpha needs a nonempty batch")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    return float(np.clip(n_neg / max(n_pos, 1), WEIGHT_MIN, WEIGHT_MAX))


def auto_gamma(cls_masks, num_categories: int) -> np.ndarray:
    """Inverse-frequency class weights normalised so uniform counts give ones."""
    c = np.concatenate([np.asarray(m).ravel() for m in cls_masks]).astype(int)
    if c.size == 0:
        raise ValueError("auto_gamma needs a nonempty batch")
    k1 = num_categories + 1
    counts = np.bincount(c, minlength=k1)[:k1]
    gamma = c.size / (k1 * np.maximum(counts, 1))
    return np.clip(gamma, WEIGHT_MIN, WEIGHT_MAX)
