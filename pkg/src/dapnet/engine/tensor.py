"""Array-valued reverse-mode autodiff node."""
from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand extents do not agree."""


class Tensor:
    """A float64 array plus the bookkeeping needed to backpropagate through it.

    Every op builds a new ``Tensor`` whose ``_backward`` maps the upstream
    gradient to one gradient per parent (``None`` where a parent takes none).
    Tensors are never mutated by ops; only ``grad`` is written, and only
    during :meth:`backward`.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        _parents: Sequence["Tensor"] = (),
        _backward: Optional[Callable] = None,
        _op: str = "",
    ):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise DimensionError(f"empty tensor of shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self._parents = tuple(_parents)
        self._backward = _backward
        self._op = _op

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def _topo(self) -> list:
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return order

    def backward(self, grad: Optional[np.ndarray] = None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every reachable leaf.

        Intermediate nodes get their ``grad`` filled too, which is handy for
        debugging but means a graph should be backpropagated only once.
        """
        if not self.requires_grad:
            raise RuntimeError("backward() on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = self._topo()
        for node in order:
            if node._parents:
                node.grad = None
        self.grad = np.asarray(grad, dtype=np.float64).reshape(self.shape).copy()
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            pgrads = node._backward(node.grad)
            for parent, g in zip(node._parents, pgrads):
                if g is None or not parent.requires_grad:
                    continue
                if g.shape != parent.shape:
                    raise DimensionError(
                        f"{node._op} backward produced {g.shape} for parent {parent.shape}"
                    )
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64, copy=True)
                else:
                    parent.grad += g

    # operator sugar; the real definitions live in ops
    def __add__(self, other):
        from .ops import add
        return add(self, other)

    def __mul__(self, other):
        from .ops import mul
        return mul(self, other)

    def __matmul__(self, other):
        from .ops import matmul
        return matmul(self, other)


class Parameter(Tensor):
    """A named leaf tensor that always requires grad."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def result(data, parents, backward, op) -> Tensor:
    """Wrap an op's output, wiring the graph only when some parent needs it."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=parents, _backward=backward, _op=op)
    return Tensor(data, _op=op)
