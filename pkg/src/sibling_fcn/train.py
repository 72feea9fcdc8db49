"""Staged training regimes for the sibling FCN and its ablations."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .data import AnnotatedImage, AugmentRanges, MaskPair, augment, crop_patches, make_masks
from .evaluation import evaluate
from .model import (
    CLASSIFICATION_PREFIXES,
    DETECTION_PREFIXES,
    TRUNK_PREFIXES,
    ModelConfig,
    Parameters,
    build,
    forward,
    group_names,
)
from .objective import (
    LossReport,
    ObjectiveConfig,
    auto_alpha,
    auto_gamma,
    five_class_objective,
    sibling_objective,
)
from .optim import LRSchedule, OptimizerState, sgd_nesterov_step

log = logging.getLogger(__name__)

REGIMES = ("fcn5cls", "sfcn", "opi_stage1_only", "opi_skip_clspretrain", "opi_full")
LOG_FIELDS = ("step", "stage", "lr", "loss_det", "loss_cls", "loss_decay", "loss_total", "N_cls")


class DivergenceError(RuntimeError):
    def __init__(self, step: int, stage: str, value: float):
        super().__init__(f"non-finite loss {value} at step {step} (stage {stage})")
        self.step = step
        self.stage = stage


@dataclass
class Stage:
    """One training stage.

    ``loss`` is one of ``detection``, ``classification``, ``joint`` or
    ``five_class``; ``frozen`` lists parameter-group names
    (``trunk``, ``detection``, ``classification``).
    """

    name: str
    epochs: int
    loss: str
    frozen: tuple = ()
    gate: str = "objectness"
    use_opi: bool = True


@dataclass
class Regime:
    name: str
    stages: List[Stage]
    heads: str = "sibling"


@dataclass
class TrainConfig:
    stage_epochs: tuple = (30, 30, 40)
    single_stage_epochs: Optional[int] = None
    batch_size: int = 16
    base_lr: float = 0.01
    momentum: float = 0.9
    patch_size: int = 32
    patch_stride: Optional[int] = None
    mask_radius: float = 3
    augment: bool = True
    seed: int = 0

    def joint_epochs(self) -> int:
        return self.single_stage_epochs or int(sum(self.stage_epochs))


def make_regime(name: str, cfg: TrainConfig) -> Regime:
    e1, e2, e3 = cfg.stage_epochs
    stage1 = Stage("detection", e1, "detection", frozen=("classification",))
    stage2 = Stage("classification", e2, "classification", frozen=("trunk", "detection"))
    stage3 = Stage("joint", e3, "joint")
    if name == "opi_full":
        return Regime(name, [stage1, stage2, stage3])
    if name == "opi_stage1_only":
        return Regime(name, [stage1, stage2])
    if name == "opi_skip_clspretrain":
        return Regime(name, [stage1, stage3])
    if name == "sfcn":
        return Regime(name, [Stage("joint", cfg.joint_epochs(), "joint", gate="ground_truth", use_opi=False)])
    if name == "fcn5cls":
        return Regime(name, [Stage("five_class", cfg.joint_epochs(), "five_class")], heads="single")
    raise ValueError(f"unknown regime {name!r}; expected one of {REGIMES}")


def frozen_names(params: Parameters, groups: Sequence[str]) -> set:
    prefixes = {"trunk": TRUNK_PREFIXES, "detection": DETECTION_PREFIXES, "classification": CLASSIFICATION_PREFIXES}
    out = set()
    for g in groups:
        if g not in prefixes:
            raise ValueError(f"unknown parameter group {g!r}")
        out.update(group_names(params.names(), prefixes[g]))
    return out


@dataclass
class TrainingSet:
    images: np.ndarray  # (N, C, P, P)
    det: np.ndarray  # (N, P, P)
    cls: np.ndarray  # (N, P, P)

    def __len__(self) -> int:
        return len(self.images)


def build_training_set(images: Sequence[AnnotatedImage], cfg: TrainConfig) -> TrainingSet:
    px, dets, clss = [], [], []
    for im in images:
        h, w = im.pixels.shape[1:]
        masks = make_masks(im.nuclei, h, w, cfg.mask_radius)
        for patch, pm, _ in crop_patches(im.pixels, masks, cfg.patch_size, cfg.patch_stride):
            px.append(patch)
            dets.append(pm.det_mask)
            clss.append(pm.cls_mask)
    if not px:
        raise ValueError("training split is empty")
    return TrainingSet(np.stack(px), np.stack(dets), np.stack(clss))


@dataclass
class TrainResult:
    params: Parameters
    log: List[dict] = field(default_factory=list)
    stage_ends: List[tuple] = field(default_factory=list)  # (stage name, step)
    alpha: float = 1.0
    gamma: Optional[np.ndarray] = None
    val_history: List[dict] = field(default_factory=list)


def _loss(stage: Stage, outputs, det, cls, params, obj: ObjectiveConfig, alpha, gamma) -> LossReport:
    if stage.loss == "five_class":
        return five_class_objective(outputs, cls, params, obj, gamma)
    return sibling_objective(
        outputs, det, cls, params, obj, alpha, gamma,
        gate_source=stage.gate, use_opi=stage.use_opi,
        with_det=stage.loss in ("detection", "joint"),
        with_cls=stage.loss in ("classification", "joint"),
    )


def _batch(ts: TrainingSet, idx, rng, cfg: TrainConfig, ranges: AugmentRanges):
    if not cfg.augment:
        return ts.images[idx], ts.det[idx], ts.cls[idx]
    px, det, cls = [], [], []
    for i in idx:
        img, m = augment(ts.images[i], MaskPair(ts.det[i], ts.cls[i]), rng, ranges)
        px.append(img)
        det.append(m.det_mask)
        cls.append(m.cls_mask)
    return np.stack(px), np.stack(det), np.stack(cls)


def run_regime(
    regime: Regime | str,
    train_images: Sequence[AnnotatedImage],
    model_config: ModelConfig,
    objective: ObjectiveConfig,
    train_config: TrainConfig,
    val_images: Sequence[AnnotatedImage] = (),
    on_stage_end: Optional[Callable[[str, Parameters, int], None]] = None,
    on_best: Optional[Callable[[Parameters, dict], None]] = None,
    params: Optional[Parameters] = None,
) -> TrainResult:
    """Train from scratch (or from ``params``) under ``regime``.

    All randomness (initialisation, batch order, augmentation) derives from
    ``train_config.seed``.
    """
    if isinstance(regime, str):
        regime = make_regime(regime, train_config)
    if model_config.heads != regime.heads:
        model_config = ModelConfig(**{**model_config.to_dict(), "heads": regime.heads})

    seeds = np.random.SeedSequence(train_config.seed).spawn(2)
    if params is None:
        params = build(model_config, rng_seed=int(seeds[0].generate_state(1)[0]))
    rng = np.random.default_rng(seeds[1])
    ts = build_training_set(train_images, train_config)
    k = model_config.num_categories
    alpha = objective.alpha if objective.alpha_mode == "fixed" else auto_alpha(ts.det)
    if objective.gamma_mode == "fixed":
        gamma = np.asarray(objective.gamma if objective.gamma is not None else np.ones(k + 1), dtype=float)
    else:
        gamma = auto_gamma(ts.cls, k)
    log.info("regime %s: %d patches, alpha=%.3f gamma=%s", regime.name, len(ts), alpha, np.round(gamma, 3))

    result = TrainResult(params=params, alpha=alpha, gamma=gamma)
    ranges = AugmentRanges()
    step = 0
    best_score = -math.inf
    n_batches = max(1, math.ceil(len(ts) / train_config.batch_size))
    for stage in regime.stages:
        frozen = frozen_names(params, stage.frozen)
        params.set_trainable(frozen)
        state = OptimizerState(momentum=train_config.momentum, learning_rate=train_config.base_lr)
        schedule = LRSchedule(base_lr=train_config.base_lr, stage_epochs=stage.epochs)
        for epoch in range(stage.epochs):
            state.learning_rate = schedule(epoch)
            order = rng.permutation(len(ts))
            for b in range(n_batches):
                idx = order[b * train_config.batch_size:(b + 1) * train_config.batch_size]
                if len(idx) < 2:
                    continue
                x, det, cls = _batch(ts, idx, rng, train_config, ranges)
                params.zero_grad()
                outputs = forward(params, x, mode="train", frozen=frozen)
                report = _loss(stage, outputs, det, cls, params, objective, alpha, gamma)
                if not math.isfinite(report.loss_total):
                    log.error("divergence at step %d (stage %s)", step, stage.name)
                    raise DivergenceError(step, stage.name, report.loss_total)
                ad.backprop(report.total)
                for name in params.names():
                    if name not in frozen and params[name].grad is None:
                        params[name].grad = np.zeros_like(params[name].data)
                sgd_nesterov_step(params.tensors, state, frozen)
                result.log.append({
                    "step": step, "stage": stage.name, "lr": state.learning_rate,
                    "loss_det": report.loss_det, "loss_cls": report.loss_cls,
                    "loss_decay": report.loss_decay, "loss_total": report.loss_total, "N_cls": report.n_cls,
                })
                step += 1
        params.set_trainable(())
        result.stage_ends.append((stage.name, step))
        if on_stage_end is not None:
            on_stage_end(stage.name, params, step)
        if val_images:
            rep = evaluate(params, list(val_images))
            entry = {"stage": stage.name, "step": step, "det_f1": rep.det_f1, "cls_f1": rep.cls_f1}
            result.val_history.append(entry)
            score = rep.det_f1 + rep.cls_f1
            if score > best_score:
                best_score = score
                if on_best is not None:
                    on_best(params, entry)
    return result


def format_log(rows: Sequence[dict]) -> str:
    lines = [",".join(LOG_FIELDS)]
    for r in rows:
        lines.append(",".join([
            str(r["step"]), r["stage"], repr(float(r["lr"])),
            repr(float(r["loss_det"])), repr(float(r["loss_cls"])), repr(float(r["loss_decay"])),
            repr(float(r["loss_total"])), str(int(r["N_cls"])),
        ]))
    return "\n".join(lines) + "\n"
