import numpy as np
import pytest

from sibling_fcn import autodiff as ad

FD_EPS = 1e-5
# Gradients smaller than this are compared absolutely; central differences
# carry ~1e-11 round-off at this step size.
REL_FLOOR = 1e-7


def rel_error(analytic, numeric) -> float:
    a, n = float(analytic), float(numeric)
    return abs(a - n) / max(abs(a), abs(n), REL_FLOOR)


def fd_check(loss_fn, tensors, points=10, eps=FD_EPS, seed=0):
    """Max relative error between backprop and central differences.

    ``loss_fn()`` must rebuild the graph from the current ``tensor.data`` and
    return a scalar Tensor. ``points`` random entries are probed per tensor
    (all entries when the tensor is smaller).
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    loss = loss_fn()
    ad.backprop(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, g in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        n = flat.size
        picks = range(n) if n <= points else rng.choice(n, size=points, replace=False)
        for i in picks:
            old = flat[i]
            flat[i] = old + eps
            up = loss_fn().item()
            flat[i] = old - eps
            down = loss_fn().item()
            flat[i] = old
            numeric = (up - down) / (2 * eps)
            worst = max(worst, rel_error(g.reshape(-1)[i], numeric))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
