"""Minimal reverse-mode automatic differentiation over numpy arrays.

The expression graph is built eagerly through operator overloading on
``Var``.  Only the operations the barrier losses need are provided:
dense matrix products, tanh, elementwise arithmetic with numpy
broadcasting, reductions, and an axis maximum whose gradient follows
the first maximizing index.  Everything is float64.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Edge = tuple["Var", Callable[[np.ndarray], np.ndarray]]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape``, undoing numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


class Var:
    """A float64 array plus backward edges to the nodes it was built from."""

    __slots__ = ("value", "_edges")

    def __init__(self, value, _edges: tuple[Edge, ...] = ()):
        self.value = np.asarray(value, dtype=np.float64)
        self._edges = _edges

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def __repr__(self) -> str:
        return f"Var(shape={self.shape})"

    # arithmetic ------------------------------------------------------

    def __add__(self, other):
        o = as_var(other)
        return Var(self.value + o.value,
                   ((self, lambda g: _unbroadcast(g, self.shape)),
                    (o, lambda g: _unbroadcast(g, o.shape))))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, ((self, lambda g: -g),))

    def __sub__(self, other):
        o = as_var(other)
        return Var(self.value - o.value,
                   ((self, lambda g: _unbroadcast(g, self.shape)),
                    (o, lambda g: _unbroadcast(-g, o.shape))))

    def __rsub__(self, other):
        return as_var(other) - self

    def __mul__(self, other):
        o = as_var(other)
        return Var(self.value * o.value,
                   ((self, lambda g: _unbroadcast(g * o.value, self.shape)),
                    (o, lambda g: _unbroadcast(g * self.value, o.shape))))

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = as_var(other)
        return Var(self.value / o.value,
                   ((self, lambda g: _unbroadcast(g / o.value, self.shape)),
                    (o, lambda g: _unbroadcast(-g * self.value / o.value ** 2,
                                               o.shape))))

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __pow__(self, k):
        if not isinstance(k, (int, float)):
            raise TypeError("exponent must be a plain number")
        return Var(self.value ** k,
                   ((self, lambda g: g * k * self.value ** (k - 1)),))

    def __matmul__(self, other):
        o = as_var(other)
        if self.ndim != 2 or o.ndim != 2:
            raise ValueError("matmul is defined for 2-D nodes only")
        return Var(self.value @ o.value,
                   ((self, lambda g: g @ o.value.T),
                    (o, lambda g: self.value.T @ g)))

    # shape ops -------------------------------------------------------

    @property
    def T(self):
        if self.ndim != 2:
            raise ValueError("T is defined for 2-D nodes only")
        return Var(self.value.T, ((self, lambda g: g.T),))

    def reshape(self, shape):
        return Var(self.value.reshape(shape),
                   ((self, lambda g: g.reshape(self.shape)),))

    def __getitem__(self, key):
        own_shape = self.shape

        def vjp(g, key=key, shape=own_shape):
            out = np.zeros(shape)
            np.add.at(out, key, g)
            return out

        return Var(self.value[key], ((self, vjp),))

    # reductions ------------------------------------------------------

    def sum(self, axis: int | None = None):
        if axis is None:
            shape = self.shape
            return Var(self.value.sum(),
                       ((self, lambda g: g * np.ones(shape)),))
        ax = axis if axis >= 0 else axis + self.ndim
        shape = self.shape
        return Var(self.value.sum(axis=ax),
                   ((self, lambda g: np.broadcast_to(
                       np.expand_dims(g, ax), shape).copy()),))


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return Var(out, ((x, lambda g: g * (1.0 - out ** 2)),))


def relu(x: Var) -> Var:
    """max(0, x) elementwise; the gradient at exactly zero is zero."""
    mask = x.value > 0.0
    return Var(np.where(mask, x.value, 0.0), ((x, lambda g: g * mask),))


def amax(x: Var, axis: int) -> Var:
    """Maximum along ``axis``; gradient flows to the first maximizing index."""
    ax = axis if axis >= 0 else axis + x.ndim
    idx = np.argmax(x.value, axis=ax)
    picked = np.take_along_axis(x.value, np.expand_dims(idx, ax), axis=ax)
    out = np.squeeze(picked, axis=ax)

    def vjp(g, x=x, idx=idx, ax=ax):
        full = np.zeros_like(x.value)
        np.put_along_axis(full, np.expand_dims(idx, ax),
                          np.expand_dims(g, ax), axis=ax)
        return full

    return Var(out, ((x, vjp),))


def _topo(root: Var) -> list[Var]:
    """Iterative post-order: parents appear before any node using them."""
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._edges:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad(output: Var, leaves: Sequence[Var]) -> list[np.ndarray]:
    """Gradients of a scalar ``output`` w.r.t. each leaf.

    Each call runs a fresh reverse pass; leaves that do not influence
    the output get zero arrays of their shape.
    """
    if output.ndim != 0:
        raise ValueError("grad expects a scalar output")
    order = _topo(output)
    adjoint: dict[int, np.ndarray] = {id(output): np.ones(())}
    for node in reversed(order):
        a = adjoint.get(id(node))
        if a is None:
            continue
        for parent, vjp in node._edges:
            contrib = vjp(a)
            pid = id(parent)
            prev = adjoint.get(pid)
            adjoint[pid] = contrib if prev is None else prev + contrib
    return [np.asarray(adjoint.get(id(leaf), np.zeros(leaf.shape)))
            for leaf in leaves]
