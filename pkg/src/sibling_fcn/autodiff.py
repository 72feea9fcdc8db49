"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the operations the sibling FCN needs are provided. Image tensors are
laid out NCHW; 3-D ``(C, H, W)`` inputs are accepted by the convolution,
normalisation and softmax ops and treated as a batch of one.
"""

from __future__ import annotations

from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_CLAMP = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class StaleGraphError(RuntimeError):
    """Raised when backprop is asked to traverse a graph it already consumed."""


class Tensor:
    """Dense array with an optional gradient buffer and a link to its creator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable[[np.ndarray], None]] = None,
        _op: str = "",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 0 and 0 in arr.shape:
            raise ValueError(f"tensor shape must be positive, got {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        backprop(self)

    def __repr__(self) -> str:
        op = f", op={self._op}" if self._op else ""
        return f"Tensor(shape={self.shape}{op}, requires_grad={self.requires_grad})"


def _result(data: np.ndarray, parents: Sequence[Tensor], op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _op=op)


def _topo_order(root: Tensor) -> list:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backprop(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Interior nodes release their closures afterwards, so calling this twice on
    the same loss raises :class:`StaleGraphError`.
    """
    if loss.data.size != 1:
        raise ValueError(f"backprop needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise StaleGraphError("graph already consumed; re-run forward before backprop")
    if not loss.requires_grad:
        loss._consumed = True
        return
    order = _topo_order(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                node._accumulate(g)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()
    loss._consumed = True


def _wire(out: Tensor, parents: Sequence[Tensor], fn) -> Tensor:
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = fn
    return out


def _as_batch(x: Tensor):
    if x.data.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.data.ndim != 4:
        raise ValueError(f"expected a (C,H,W) or (B,C,H,W) tensor, got shape {x.shape}")
    return x, False


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = _result(x.data.reshape(shape), (x,), "reshape")
    return _wire(out, (x,), lambda g: (g.reshape(src),))


def _unbatch(y: Tensor, squeezed: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeezed else y


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlate ``x`` with kernel ``w`` of shape ``(C_out, C_in, k, k)``."""
    xb, squeezed = _as_batch(x)
    if w.data.ndim != 4 or w.shape[2] != w.shape[3]:
        raise ValueError(f"kernel must be (C_out, C_in, k, k), got {w.shape}")
    c_out, c_in, k, _ = w.shape
    if xb.shape[1] != c_in:
        raise ValueError(f"dimension mismatch: input has {xb.shape[1]} channels, kernel expects {c_in}")
    if b is not None and b.shape != (c_out,):
        raise ValueError(f"bias must have shape ({c_out},), got {b.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")

    xd = xb.data
    bsz, _, h, wd = xd.shape
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError("kernel larger than padded input")
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    parents = (xb, w) if b is None else (xb, w, b)
    y = _result(out, parents, "conv2d")

    def backward(g):
        gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gx = None
        if xb.requires_grad:
            cols = np.tensordot(g, w.data, axes=([1], [0]))  # (B, Ho, Wo, C_in, k, k)
            gxp = np.zeros_like(xp)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + wd] if padding else gxp
        if b is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return _unbatch(_wire(y, parents, backward), squeezed)


def conv2d_transpose(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """Learnable upsampling by ``stride`` with kernel ``(C_in, C_out, 2s, 2s)``.

    This is the exact adjoint of ``conv2d(., kernel, stride=s, padding=s//2)``
    and maps ``(H, W)`` to ``(s*H, s*W)``.
    """
    if stride not in (2, 4):
        raise ValueError(f"transposed convolution stride must be 2 or 4, got {stride}")
    xb, squeezed = _as_batch(x)
    k = 2 * stride
    pad = stride // 2
    if w.data.ndim != 4 or w.shape[2:] != (k, k):
        raise ValueError(f"kernel must be (C_in, C_out, {k}, {k}), got {w.shape}")
    c_in, c_out = w.shape[:2]
    if xb.shape[1] != c_in:
        raise ValueError(f"dimension mismatch: input has {xb.shape[1]} channels, kernel expects {c_in}")

    xd = xb.data
    bsz, _, h, wd = xd.shape
    cols = np.tensordot(xd, w.data, axes=([1], [0]))  # (B, H, W, C_out, k, k)
    full = np.zeros((bsz, c_out, (h + 1) * stride, (wd + 1) * stride))
    for i in range(k):
        for j in range(k):
            full[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = np.ascontiguousarray(full[:, :, pad:pad + stride * h, pad:pad + stride * wd])

    y = _result(out, (xb, w), "conv2d_transpose")

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        win = sliding_window_view(gp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :wd]
        gx = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2) if xb.requires_grad else None
        gw = np.tensordot(xd, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        return gx, gw

    return _unbatch(_wire(y, (xb, w), backward), squeezed)


# -------------------------------------------------------------- normalisation


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    update_stats: bool = True,
    eps: float = BN_EPS,
    momentum: float = BN_MOMENTUM,
) -> Tensor:
    """Per-channel batch normalisation over batch and spatial axes.

    In training mode the running statistics arrays are updated in place
    (``running = momentum * running + (1 - momentum) * batch``) unless
    ``update_stats`` is false.
    """
    xb, squeezed = _as_batch(x)
    c = xb.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ValueError(f"scale/shift must have shape ({c},)")
    xd = xb.data
    m = xd.shape[0] * xd.shape[2] * xd.shape[3]
    bshape = (1, c, 1, 1)

    if training:
        if m < 2:
            raise ValueError("training-mode batch norm needs at least 2 values per channel")
        mean = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        if update_stats:
            running_mean *= momentum
            running_mean += (1.0 - momentum) * mean
            running_var *= momentum
            running_var += (1.0 - momentum) * var * (m / (m - 1))
    else:
        mean, var = running_mean, running_var

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (xd - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = xhat * scale.data.reshape(bshape) + shift.data.reshape(bshape)
    parents = (xb, scale, shift)
    y = _result(out, parents, "batch_norm")

    def backward(g):
        gscale = (g * xhat).sum(axis=(0, 2, 3))
        gshift = g.sum(axis=(0, 2, 3))
        dxhat = g * scale.data.reshape(bshape)
        if training:
            s1 = dxhat.sum(axis=(0, 2, 3)).reshape(bshape)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(bshape)
            gx = (inv_std.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv_std.reshape(bshape)
        return gx, gscale, gshift

    return _unbatch(_wire(y, parents, backward), squeezed)


# ----------------------------------------------------------------- pointwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    y = _result(np.maximum(x.data, 0.0), (x,), "relu")
    return _wire(y, (x,), lambda g: (g * mask,))


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over the channel axis (axis -3) with max subtraction."""
    if x.data.ndim not in (3, 4):
        raise ValueError(f"softmax_channels expects (C,H,W) or (B,C,H,W), got {x.shape}")
    if x.shape[-3] < 2:
        raise ValueError("softmax_channels needs at least 2 channels")
    z = x.data - x.data.max(axis=-3, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-3, keepdims=True)
    y = _result(p, (x,), "softmax")

    def backward(g):
        return (p * (g - (g * p).sum(axis=-3, keepdims=True)),)

    return _wire(y, (x,), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch in add: {a.shape} vs {b.shape}")
    y = _result(a.data + b.data, (a, b), "add")
    return _wire(y, (a, b), lambda g: (g, g))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ValueError(f"shape mismatch in mul: {a.shape} vs {b.shape}") from exc
    y = _result(out, (a, b), "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _wire(y, (a, b), backward)


def scale(x: Tensor, c: float) -> Tensor:
    y = _result(x.data * c, (x,), "scale")
    return _wire(y, (x,), lambda g: (g * c,))


def log_clamped(x: Tensor, floor: float = LOG_CLAMP) -> Tensor:
    """``log(max(x, floor))``; zero gradient where the clamp is active."""
    active = ~(x.data <= floor)  # NaN stays active so it propagates
    safe = np.where(active, x.data, floor)
    y = _result(np.log(safe), (x,), "log")
    return _wire(y, (x,), lambda g: (np.where(active, g / safe, 0.0),))


def channel_slice(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of an NCHW tensor, keeping the channel axis."""
    src = x.shape
    y = _result(x.data[:, start:stop], (x,), "slice")

    def backward(g):
        full = np.zeros(src)
        full[:, start:stop] = g
        return (full,)

    return _wire(y, (x,), backward)


def weighted_sum(x: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar ``sum(x * weights)`` where ``weights`` is a constant."""
    weights = np.broadcast_to(np.asarray(weights, dtype=np.float64), x.shape)
    y = _result(np.sum(x.data * weights), (x,), "weighted_sum")
    return _wire(y, (x,), lambda g: (g * weights,))


def sum_squares(x: Tensor) -> Tensor:
    y = _result(np.sum(x.data * x.data), (x,), "sum_squares")
    return _wire(y, (x,), lambda g: (2.0 * g * x.data,))


def add_n(terms: Iterable[Tensor]) -> Tensor:
    terms = list(terms)
    if not terms:
        return Tensor(0.0)
    shape = terms[0].shape
    for t in terms:
        if t.shape != shape:
            raise ValueError(f"shape mismatch in add_n: {t.shape} vs {shape}")
    y = _result(sum(t.data for t in terms), terms, "add_n")
    return _wire(y, terms, lambda g: tuple(g for _ in terms))
