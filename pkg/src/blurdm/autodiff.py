"""Minimal define-by-run reverse-mode automatic differentiation over numpy arrays.

Every primitive takes and returns :class:`Node` objects. Values may carry
leading batch dimensions; binary elementwise primitives broadcast like numpy
and reduce gradients back to each operand's shape. ``relu'(0)`` is taken as 0,
as is the derivative of ``|x|`` at 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


class Node:
    __slots__ = ("value", "grad", "op", "parents", "backward_fn", "requires_grad", "name",
                 "_consumed")

    def __init__(self, value, parents=(), backward_fn=None, op="leaf", requires_grad=None,
                 name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = None
        self.op = op
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name
        self._consumed = False

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.value.shape}>"

    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)


def leaf(value, name=None) -> Node:
    """A trainable input; gradients are collected for it."""
    return Node(value, requires_grad=True, name=name)


def const(value) -> Node:
    return Node(value, requires_grad=False, op="const")


def _lift(x) -> Node:
    return x if isinstance(x, Node) else const(x)


def custom_op(value, parents, backward_fn: Callable, op: str) -> Node:
    """Register a primitive: ``backward_fn(g)`` returns one gradient per parent (or None)."""
    return Node(value, parents, backward_fn, op)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(name: str, *nodes: Node) -> tuple:
    try:
        return np.broadcast_shapes(*(n.shape for n in nodes))
    except ValueError:
        raise ValueError(
            f"{name}: incompatible shapes {[n.shape for n in nodes]}") from None


# ----------------------------------------------------------------------------- primitives

def add(a: Node, b: Node) -> Node:
    _broadcast_shape("add", a, b)
    return custom_op(a.value + b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Node, b: Node) -> Node:
    _broadcast_shape("sub", a, b)
    return custom_op(a.value - b.value, (a, b),
                     lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)), "sub")


def scale(a: Node, c) -> Node:
    """Multiply by a constant (scalar or array broadcastable to ``a``)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and np.broadcast_shapes(a.shape, c.shape) != a.shape:
        raise ValueError(f"scale: constant of shape {c.shape} does not broadcast to {a.shape}")
    return custom_op(a.value * c, (a,), lambda g: (g * c,), "scale")


def mul(a: Node, b: Node) -> Node:
    _broadcast_shape("mul", a, b)
    av, bv = a.value, b.value
    return custom_op(av * bv, (a, b),
                     lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)),
                     "mul")


def matvec(W: Node, x: Node) -> Node:
    """``W @ x`` for ``W`` of shape (m, n) and ``x`` of shape (..., n)."""
    if W.value.ndim != 2 or x.shape[-1:] != W.shape[1:]:
        raise ValueError(f"matvec: cannot apply W{W.shape} to x{x.shape}")
    Wv, xv = W.value, x.value

    def back(g):
        gW = np.tensordot(g, xv, axes=(tuple(range(g.ndim - 1)),) * 2)
        return gW, g @ Wv

    return custom_op(xv @ Wv.T, (W, x), back, "matvec")


def matmul(A: Node, B: Node) -> Node:
    """Matrix product of 2D operands."""
    if A.value.ndim != 2 or B.value.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {A.shape} @ {B.shape}")
    Av, Bv = A.value, B.value
    return custom_op(Av @ Bv, (A, B), lambda g: (g @ Bv.T, Av.T @ g), "matmul")


def affine(W: Node, x: Node, b: Node) -> Node:
    """``W x + b`` applied along the last axis of ``x``."""
    if W.value.ndim != 2 or x.shape[-1:] != W.shape[1:] or b.shape != W.shape[:1]:
        raise ValueError(f"affine: W{W.shape}, x{x.shape}, b{b.shape} are incompatible")
    Wv, xv = W.value, x.value
    lead = tuple(range(xv.ndim - 1))

    def back(g):
        return np.tensordot(g, xv, axes=(lead, lead)), g @ Wv, g.sum(axis=lead)

    return custom_op(xv @ Wv.T + b.value, (W, x, b), back, "affine")


def relu(a: Node) -> Node:
    mask = a.value > 0
    return custom_op(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def tanh(a: Node) -> Node:
    y = np.tanh(a.value)
    return custom_op(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def identity(a: Node) -> Node:
    return a


def concat(nodes, axis: int = -1) -> Node:
    nodes = list(nodes)
    if not nodes:
        raise ValueError("concat: nothing to concatenate")
    try:
        value = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[n.shape for n in nodes]}") from None
    sizes = np.cumsum([n.shape[axis] for n in nodes])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return custom_op(value, nodes, back, "concat")


def slice_last(a: Node, start: int, stop: int) -> Node:
    """``a[..., start:stop]``."""
    if not 0 <= start < stop <= a.shape[-1]:
        raise ValueError(f"slice_last: [{start}:{stop}] out of range for shape {a.shape}")
    shape = a.shape

    def back(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return custom_op(a.value[..., start:stop], (a,), back, "slice")


def reshape(a: Node, shape) -> Node:
    old = a.shape
    try:
        value = a.value.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {old} to {shape}") from None
    return custom_op(value, (a,), lambda g: (g.reshape(old),), "reshape")


def sum(a: Node, axis=None) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = a.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return custom_op(a.value.sum(axis=axis), (a,), back, "sum")


def mean(a: Node, axis=None) -> Node:
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis), 1.0 / n)


def l1(a: Node) -> Node:
    """Mean absolute value (scalar)."""
    sign = np.sign(a.value)
    n = a.value.size
    return custom_op(np.abs(a.value).mean(), (a,), lambda g: (g * sign / n,), "l1")


def l2(a: Node) -> Node:
    """Mean squared value (scalar)."""
    v = a.value
    n = v.size
    return custom_op(np.mean(v * v), (a,), lambda g: (g * 2.0 * v / n,), "l2")


PRIMITIVES = ("add", "sub", "scale", "mul", "matvec", "matmul", "affine", "relu", "tanh",
              "concat", "sum", "mean", "l1", "l2")


# ----------------------------------------------------------------------------- backward

class Tape:
    """Topologically ordered record of one forward evaluation ending at ``loss``."""

    def __init__(self, loss: Node):
        self.loss = loss
        order: list[Node] = []
        seen: set[int] = set()
        stack = [(loss, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in reversed(node.parents):
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order

    def backward(self) -> dict[Node, np.ndarray]:
        loss = self.loss
        if loss.value.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
        if loss._consumed:
            raise RuntimeError("backward: this tape has already been replayed")
        loss._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.backward_fn is None:
                node.grad = g
                if node.requires_grad:
                    leaves[node] = g
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return leaves


def backward(loss: Node) -> dict[Node, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every trainable leaf reachable from ``loss``.

    Also stores each gradient on ``leaf.grad``. A loss may be backpropagated once.
    """
    return Tape(loss).backward()


# ----------------------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    num_coords: int
    tol: float
    worst: tuple | None = None

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(f: Callable[[dict], Node], theta: dict, tol: float = 1e-5, h: float = 1e-5,
               max_coords: int = 200, seed: int = 0, floor: float = 1e-6) -> GradCheckReport:
    """Compare reverse-mode gradients of ``f`` against central differences.

    ``f`` receives a dict of Nodes keyed like ``theta`` and returns a scalar Node.
    Up to ``max_coords`` coordinates are sampled across all entries. The error
    per coordinate is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
    """
    theta = {k: np.array(v, dtype=np.float64) for k, v in theta.items()}
    leaves = {k: leaf(v, name=k) for k, v in theta.items()}
    loss = f(leaves)
    backward(loss)
    analytic = {k: (n.grad if n.grad is not None else np.zeros_like(n.value))
                for k, n in leaves.items()}

    coords = [(k, i) for k, v in theta.items() for i in range(v.size)]
    rng = np.random.default_rng(seed)
    if len(coords) > max_coords:
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    def evaluate(vals):
        return float(f({k: const(v) for k, v in vals.items()}).value)

    worst_err, worst = 0.0, None
    for k, i in coords:
        flat = theta[k].reshape(-1)
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate(theta)
        flat[i] = orig - h
        fm = evaluate(theta)
        flat[i] = orig
        num = (fp - fm) / (2 * h)
        ana = float(analytic[k].reshape(-1)[i])
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        if worst is None or err > worst_err:
            worst_err, worst = err, (k, i, ana, num)
    return GradCheckReport(worst_err, len(coords), tol, worst)
