"""Initialisation, Nesterov SGD and the step learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Mapping, Sequence

import numpy as np

from .autodiff import Tensor


def fans(shape: Sequence[int]) -> tuple:
    """Return ``(fan_in, fan_out)`` counting the receptive field for conv kernels."""
    if len(shape) < 2:
        raise ValueError(f"fan computation needs rank >= 2, got shape {tuple(shape)}")
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    return shape[1] * receptive, shape[0] * receptive


def xavier_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


def xavier_init(shape: Sequence[int], rng: np.random.Generator) -> np.ndarray:
    bound = xavier_bound(*fans(shape))
    return rng.uniform(-bound, bound, size=tuple(shape))


@dataclass
class LRSchedule:
    """Piecewise-constant learning rate.

    The reference schedule keeps ``base_lr`` until epoch 100, drops ten-fold
    at 100 and again at 150. ``stage_epochs`` rescales those boundaries to a
    shorter budget: boundary ``b`` becomes ``round(b * stage_epochs / 200)``.
    """

    base_lr: float = 0.01
    boundaries: tuple = (100, 150)
    factor: float = 0.1
    stage_epochs: int | None = None
    reference_epochs: int = 200

    def scaled_boundaries(self) -> tuple:
        if self.stage_epochs is None:
            return tuple(self.boundaries)
        r = self.stage_epochs / self.reference_epochs
        return tuple(int(round(b * r)) for b in self.boundaries)

    def __call__(self, epoch: int) -> float:
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        lr = self.base_lr
        for b in self.scaled_boundaries():
            if epoch >= b:
                lr *= self.factor
        return lr


def lr_schedule(epoch: int) -> float:
    """Full-scale schedule: 0.01, then 0.001 from epoch 100, 0.0001 from 150."""
    return LRSchedule()(epoch)


@dataclass
class OptimizerState:
    momentum: float = 0.9
    learning_rate: float = 0.01
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_nesterov_step(
    params: Mapping[str, Tensor],
    state: OptimizerState,
    frozen: Iterable[str] = (),
) -> None:
    """In-place Nesterov update of every non-frozen parameter.

    ``v <- mu*v - lr*g``; ``w <- w + mu*v - lr*g``.
    """
    if state.learning_rate <= 0:
        raise ValueError("learning rate must be positive")
    frozen = set(frozen)
    mu, lr = state.momentum, state.learning_rate
    for name, p in params.items():
        if name in frozen:
            continue
        if p.grad is None:
            raise ValueError(f"missing gradient for trainable parameter {name!r}")
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v - lr * p.grad
        state.velocity[name] = v
        p.data += mu * v - lr * p.grad
