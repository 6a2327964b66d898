"""Minimal reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps a float64 ndarray and remembers its parent nodes plus a
vector-Jacobian closure. backward() walks the graph once in reverse
topological order and accumulates gradients into ``.grad``. Only the
operations the simulator and trainer actually use are implemented.

The module-level functions (exp, log, sigmoid, sqrt, maximum) accept
plain ndarrays as well and then return ndarrays, so numerical code can
be written once and run with or without gradient tracking.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` over the axes numpy broadcast to reach grad.shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    squashed = tuple(
        i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1
    )
    if squashed:
        grad = grad.sum(axis=squashed, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """One node of the autodiff graph."""

    # numpy must not consume Tensor operands elementwise; returning
    # NotImplemented from its side routes `ndarray <op> Tensor` to the
    # __r*__ methods below.
    __array_ufunc__ = None
    __array_priority__ = 1000.0

    __slots__ = ("data", "grad", "_parents", "_vjp")

    def __init__(self, data):
        self.data = _as_array(data)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Vjp | None = None

    # ------------------------------------------------------------------
    # basic introspection

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __float__(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, grad={'set' if self.grad is not None else 'none'})"

    # ------------------------------------------------------------------
    # graph mechanics

    def detach(self) -> "Tensor":
        """A new leaf sharing this node's data, cut off from the graph."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(node) into .grad for every ancestor."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar root")
        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._vjp is None or node.grad is None:
                continue
            grads = node._vjp(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None:
                    continue
                # never accumulate in place: g may alias another node's grad
                parent.grad = g if parent.grad is None else parent.grad + g

    # ------------------------------------------------------------------
    # arithmetic

    def __add__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            out = make_node(
                a.data + b.data,
                (a, b),
                lambda g: (
                    _unbroadcast(g, a.data.shape),
                    _unbroadcast(g, b.data.shape),
                ),
            )
            return out
        c = _as_array(other)
        return make_node(
            self.data + c, (self,), lambda g: (_unbroadcast(g, self.data.shape),)
        )

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            return make_node(
                a.data - b.data,
                (a, b),
                lambda g: (
                    _unbroadcast(g, a.data.shape),
                    _unbroadcast(-g, b.data.shape),
                ),
            )
        c = _as_array(other)
        return make_node(
            self.data - c, (self,), lambda g: (_unbroadcast(g, self.data.shape),)
        )

    def __rsub__(self, other):
        c = _as_array(other)
        return make_node(
            c - self.data, (self,), lambda g: (_unbroadcast(-g, self.data.shape),)
        )

    def __neg__(self):
        return make_node(-self.data, (self,), lambda g: (-g,))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            return make_node(
                a.data * b.data,
                (a, b),
                lambda g: (
                    _unbroadcast(g * b.data, a.data.shape),
                    _unbroadcast(g * a.data, b.data.shape),
                ),
            )
        c = _as_array(other)
        return make_node(
            self.data * c, (self,), lambda g: (_unbroadcast(g * c, self.data.shape),)
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            return make_node(
                a.data / b.data,
                (a, b),
                lambda g: (
                    _unbroadcast(g / b.data, a.data.shape),
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
                ),
            )
        c = _as_array(other)
        return make_node(
            self.data / c, (self,), lambda g: (_unbroadcast(g / c, self.data.shape),)
        )

    def __rtruediv__(self, other):
        c = _as_array(other)
        return make_node(
            c / self.data,
            (self,),
            lambda g: (_unbroadcast(-g * c / (self.data * self.data), self.data.shape),),
        )

    def __pow__(self, exponent):
        p = float(exponent)
        return make_node(
            self.data**p,
            (self,),
            lambda g: (g * p * self.data ** (p - 1.0),),
        )

    def __matmul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other
            return make_node(
                a.data @ b.data,
                (a, b),
                lambda g: (g @ b.data.T, a.data.T @ g),
            )
        c = _as_array(other)
        return make_node(self.data @ c, (self,), lambda g: (g @ c.T,))

    def __rmatmul__(self, other):
        c = _as_array(other)
        return make_node(c @ self.data, (self,), lambda g: (c.T @ g,))

    # ------------------------------------------------------------------
    # shape ops and reductions

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ShapeError("T is defined for 2-D tensors only")
        return make_node(self.data.T, (self,), lambda g: (g.T,))

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        orig = self.data.shape
        return make_node(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(orig),)
        )

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        orig = self.data.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, orig),)
            ax = axis if isinstance(axis, tuple) else (axis,)
            if not keepdims:
                g = np.expand_dims(g, ax)
            return (np.broadcast_to(g, orig),)

        return make_node(out, (self,), vjp)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.data.size
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            n = 1
            for a in ax:
                n *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def make_node(data, parents: tuple[Tensor, ...], vjp: Vjp | None) -> Tensor:
    """Build a graph node from raw data, parent tensors, and a VJP.

    `vjp` receives the node's output gradient and must return one
    gradient (or None) per parent, each already shaped like that
    parent's data.
    """
    t = Tensor(data)
    t._parents = parents
    t._vjp = vjp
    return t


def _toposort(root: Tensor) -> list[Tensor]:
    # iterative post-order: parents always precede their children
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


# ----------------------------------------------------------------------
# elementwise functions, usable on Tensors and plain arrays alike


def exp(x):
    if not isinstance(x, Tensor):
        return np.exp(x)
    out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,))


def log(x):
    if not isinstance(x, Tensor):
        return np.log(x)
    return make_node(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x):
    def _stable(v):
        out = np.empty_like(v, dtype=np.float64)
        pos = v >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
        ev = np.exp(v[~pos])
        out[~pos] = ev / (1.0 + ev)
        return out

    if not isinstance(x, Tensor):
        return _stable(_as_array(x))
    out = _stable(x.data)
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),))


def sqrt(x):
    if not isinstance(x, Tensor):
        return np.sqrt(x)
    out = np.sqrt(x.data)
    return make_node(out, (x,), lambda g: (g / (2.0 * out),))


def maximum(x, floor: float):
    """Elementwise max against a scalar floor; gradient passes where x >= floor."""
    if not isinstance(x, Tensor):
        return np.maximum(x, floor)
    mask = (x.data >= floor).astype(np.float64)
    return make_node(np.maximum(x.data, floor), (x,), lambda g: (g * mask,))


def value_of(x) -> np.ndarray:
    """The underlying ndarray of a Tensor, or the array itself."""
    return x.data if isinstance(x, Tensor) else np.asarray(x)
