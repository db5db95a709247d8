"""Differentiable kernels used by the segmentation network.

Only the shapes the network needs are supported. There is no general
broadcasting: elementwise operands must agree exactly, and matmul accepts
either identical leading (batch) dimensions or a 2-D right operand.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from typing import Optional, Sequence

import numpy as np

from .tensor import DimensionError, Parameter, Tensor, as_tensor, result

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


_decisions: contextvars.ContextVar = contextvars.ContextVar("decisions", default=None)


@contextmanager
def record_decisions():
    """Collect the discrete choices (ReLU masks, max winners) made by ops.

    Yields a list that fills up as ops run. Two forward passes with equal
    lists went through the same linear pieces of the network.
    """
    log: list = []
    token = _decisions.set(log)
    try:
        yield log
    finally:
        _decisions.reset(token)


def _note(choice: np.ndarray):
    log = _decisions.get()
    if log is not None:
        log.append(choice)


def _swap(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    if b.ndim != 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ, {a.shape} vs {b.shape}")
    out = a.data @ b.data

    def backward(g):
        ga = g @ _swap(b.data) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _swap(a.data) @ g
        return ga, gb

    return result(out, (a, b), backward, "matmul")


def transpose(x: Tensor) -> Tensor:
    """Swap the two trailing axes."""
    return result(_swap(x.data), (x,), lambda g: (_swap(g),), "transpose")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    out = x.data.reshape(shape)
    return result(out, (x,), lambda g: (g.reshape(src),), "reshape")


def pointwise_affine(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Apply the same ``Cin -> Cout`` affine map to every position of ``x``.

    This is a width-1 convolution over the point axis. ``b=None`` means no
    bias, which is what a map feeding straight into batch norm wants.
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"pointwise_affine: input {x.shape} vs weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"pointwise_affine: bias {b.shape} vs weight {w.shape}")
    cin, cout = w.shape
    x2 = x.data.reshape(-1, cin)
    out = x2 @ w.data
    if b is not None:
        out = out + b.data
    out = out.reshape(x.shape[:-1] + (cout,))

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = (g2 @ w.data.T).reshape(x.shape) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return result(out, parents, backward, "affine")


class BatchNorm:
    """Learned per-channel scale/shift plus running statistics."""

    def __init__(self, width: int, name: str, eps: float = BN_EPS, momentum: float = BN_MOMENTUM):
        self.width = width
        self.name = name
        self.eps = eps
        self.momentum = momentum
        self.scale = Parameter(np.ones(width), f"{name}.scale")
        self.shift = Parameter(np.zeros(width), f"{name}.shift")
        self.running_mean = np.zeros(width)
        self.running_var = np.ones(width)

    def parameters(self):
        return [self.scale, self.shift]


def batch_norm(x: Tensor, bn: BatchNorm, training: bool, update_stats: bool = True) -> Tensor:
    """Normalize the trailing channel axis over every other axis.

    In training mode the batch mean and (biased) variance are used and the
    running statistics move towards them by ``bn.momentum``; in inference
    mode the running statistics are used as-is.
    """
    if x.shape[-1] != bn.width:
        raise DimensionError(f"batch_norm: input {x.shape} vs {bn.width} channels")
    c = bn.width
    x2 = x.data.reshape(-1, c)
    n = x2.shape[0]
    if n == 0:
        raise DimensionError("batch_norm: zero-size batch")
    gamma, beta = bn.scale, bn.shift

    if training:
        mean = x2.mean(axis=0)
        var = x2.var(axis=0)
        if update_stats:
            unbiased = var * n / (n - 1) if n > 1 else var
            bn.running_mean = (1 - bn.momentum) * bn.running_mean + bn.momentum * mean
            bn.running_var = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
    else:
        mean, var = bn.running_mean, bn.running_var
    invstd = 1.0 / np.sqrt(var + bn.eps)
    xhat = (x2 - mean) * invstd
    out = (xhat * gamma.data + beta.data).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(-1, c)
        ggamma = (g2 * xhat).sum(axis=0)
        gbeta = g2.sum(axis=0)
        gx = None
        if x.requires_grad:
            gxhat = g2 * gamma.data
            if training:
                gx = invstd / n * (
                    n * gxhat - gxhat.sum(axis=0) - xhat * (gxhat * xhat).sum(axis=0)
                )
            else:
                gx = gxhat * invstd
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return result(out, (x, gamma, beta), backward, "batch_norm")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    _note(mask)
    return result(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def max_reduce(x: Tensor, axis: int) -> Tensor:
    """Maximum along ``axis``; the gradient goes to the first argmax only."""
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"max_reduce: axis {axis} invalid for shape {x.shape}")
    axis = axis % x.ndim
    idx = np.expand_dims(np.argmax(x.data, axis=axis), axis)
    _note(idx)
    out = np.take_along_axis(x.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, idx, np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return result(out, (x,), backward, "max_reduce")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    return result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def scale(x: Tensor, alpha: Tensor) -> Tensor:
    """Multiply every entry of ``x`` by the single value held in ``alpha``."""
    if alpha.data.size != 1:
        raise DimensionError(f"scale: factor must hold one value, got {alpha.shape}")
    a = alpha.data.reshape(-1)[0]

    def backward(g):
        galpha = np.full(alpha.shape, np.sum(x.data * g)) if alpha.requires_grad else None
        return g * a, galpha

    return result(x.data * a, (x, alpha), backward, "scale")


def tsum(x: Tensor) -> Tensor:
    """Sum of all entries as a one-element tensor."""
    shape = x.shape
    return result(np.array([x.data.sum()]), (x,), lambda g: (np.full(shape, g[0]),), "sum")


def softmax(x: Tensor, mode: str = "row") -> Tensor:
    """Exponentiate and normalize.

    ``row`` normalizes along the last axis. ``global`` normalizes over the two
    trailing axes together, so each matrix in a batch sums to one.
    """
    if mode == "row":
        axes = (-1,)
    elif mode == "global":
        if x.ndim < 2:
            raise DimensionError(f"softmax: global mode needs a matrix, got {x.shape}")
        axes = (-2, -1)
    else:
        raise ValueError(f"softmax: unknown mode {mode!r}")
    z = x.data - x.data.max(axis=axes, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axes, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axes, keepdims=True)),)

    return result(y, (x,), backward, "softmax")


def cross_entropy(scores: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under row-softmax of ``scores``."""
    labels = np.asarray(labels)
    if scores.ndim != 2 or labels.shape != (scores.shape[0],):
        raise DimensionError(f"cross_entropy: scores {scores.shape} vs labels {labels.shape}")
    n, c = scores.shape
    bad = np.flatnonzero((labels < 0) | (labels >= c))
    if bad.size:
        i = int(bad[0])
        raise ValueError(f"cross_entropy: label {labels[i]} at index {i} outside [0, {c})")
    labels = labels.astype(np.int64)
    z = scores.data - scores.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(lse - z[rows, labels])

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        return (p * (g[0] / n),)

    return result(np.array([loss]), (scores,), backward, "cross_entropy")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    axis = axis % tensors[0].ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(
            t.shape[d] != ref[d] for d in range(len(ref)) if d != axis
        ):
            raise DimensionError(f"concat: {ref} and {t.shape} disagree off axis {axis}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return result(out, tuple(tensors), backward, "concat")


def _flat_index(idx: np.ndarray, n: int) -> np.ndarray:
    b = idx.shape[0]
    offsets = (np.arange(b) * n).reshape((b,) + (1,) * (idx.ndim - 1))
    return (idx + offsets).reshape(-1)


def gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Per-batch row lookup: ``out[b, ...] = x[b, idx[b, ...]]``.

    ``x`` is ``B x N x C`` and ``idx`` is ``B x ...`` integer; the result is
    ``idx.shape + (C,)``. Repeated indices accumulate gradient.
    """
    idx = np.asarray(idx)
    if x.ndim != 3 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather: source {x.shape} vs index {idx.shape}")
    b, n, c = x.shape
    flat = _flat_index(idx, n)
    out = x.data.reshape(b * n, c)[flat].reshape(idx.shape + (c,))

    def backward(g):
        gx = np.zeros((b * n, c))
        np.add.at(gx, flat, g.reshape(-1, c))
        return (gx.reshape(x.shape),)

    return result(out, (x,), backward, "gather")


def weighted_gather(x: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """``out[b, q] = sum_k weights[b, q, k] * x[b, idx[b, q, k]]``.

    Used for inverse-distance interpolation; ``weights`` are constants.
    """
    idx = np.asarray(idx)
    weights = np.asarray(weights, dtype=np.float64)
    if x.ndim != 3 or idx.ndim != 3 or idx.shape != weights.shape or idx.shape[0] != x.shape[0]:
        raise DimensionError(
            f"weighted_gather: source {x.shape}, index {idx.shape}, weights {weights.shape}"
        )
    b, n, c = x.shape
    flat = _flat_index(idx, n)
    picked = x.data.reshape(b * n, c)[flat].reshape(idx.shape + (c,))
    out = np.einsum("bqk,bqkc->bqc", weights, picked)

    def backward(g):
        contrib = (weights[..., None] * g[:, :, None, :]).reshape(-1, c)
        gx = np.zeros((b * n, c))
        np.add.at(gx, flat, contrib)
        return (gx.reshape(x.shape),)

    return result(out, (x,), backward, "weighted_gather")
