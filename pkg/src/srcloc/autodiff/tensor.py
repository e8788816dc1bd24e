"""Graph nodes and the reverse sweep."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    """A value in the computation graph.

    Interior nodes hold ``_parents`` and a ``_backward`` closure that maps the
    gradient of the node to a tuple of parent gradients (``None`` for parents
    that need none). Leaves with ``requires_grad`` accumulate into ``grad``.
    """

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "op", "name")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Callable | None = None
        self.op = "leaf"
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad: np.ndarray | None = None, retain_graph: bool = False):
        if grad is None:
            if self.values.size != 1:
                raise ValueError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.values)
        order = _topological(self)
        self.grad = np.asarray(grad, dtype=self.values.dtype).reshape(self.shape)
        for node in reversed(order):
            if node.is_leaf:
                continue
            g = node.grad
            if g is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    parent.grad = pg if parent.grad is None else parent.grad + pg
            if not retain_graph:
                node.grad = None
                node._backward = None
                node._parents = ()

    # a few operators, enough for small hand-built graphs
    def __add__(self, other):
        from .ops import add

        return add(self, other)

    def __sub__(self, other):
        from .ops import sub

        return sub(self, other)

    def __mul__(self, other):
        from .ops import mul, scale

        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def node(values: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    """Wrap an op result; the graph edge is only recorded if some parent needs a gradient."""
    out = Tensor(values)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order
