"""Define-by-run reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every :class:`DiffNode` in creation order, so node ids
double as a topological order. ``backward`` walks the tape in reverse and
accumulates chain-rule contributions into each node's ``grad``.
"""
from __future__ import annotations

import itertools
from collections.abc import Mapping
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes do not conform to the op's rule."""

    def __init__(self, op_kind: str, *shapes):
        self.op_kind = op_kind
        self.shapes = shapes
        joined = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op_kind}: incompatible shapes {joined}")


class DomainError(ValueError):
    """Input outside the real domain of the op (e.g. log of a non-positive)."""


class ContractError(ValueError):
    """Caller violated a documented precondition."""


class DiffNode:
    """One value on the tape plus its accumulated gradient."""

    __slots__ = ("value", "_grad", "parents", "backward_fn", "id", "tape", "op", "name")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, tape: "Tape", value: np.ndarray, parents: tuple = (),
                 backward_fn: Callable | None = None, op: str = "leaf", name: str | None = None):
        self.value = value
        self._grad = None  # materialised on first access
        self.parents = parents
        self.backward_fn = backward_fn
        self.id = next(_ids)
        self.tape = tape
        self.op = op
        self.name = name

    @property
    def grad(self) -> np.ndarray:
        g = self._grad
        if g is None:
            g = self._grad = np.zeros_like(self.value)
        elif not g.flags.writeable or g.shape != self.value.shape:
            g = self._grad = np.array(np.broadcast_to(g, self.value.shape))
        return g

    @grad.setter
    def grad(self, g):
        self._grad = g

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        label = self.name or self.op
        return f"DiffNode(id={self.id}, {label}, shape={self.value.shape})"

    # operator sugar; right operands may be plain numbers/arrays
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(self.tape.const(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Append-only record of nodes; rebuilt for every minibatch."""

    def __init__(self):
        self.nodes: list[DiffNode] = []

    def __len__(self):
        return len(self.nodes)

    def leaf(self, value, name: str | None = None) -> DiffNode:
        arr = np.array(value, dtype=np.float64)
        node = DiffNode(self, arr, name=name)
        self.nodes.append(node)
        return node

    def const(self, value) -> DiffNode:
        return self.leaf(value, name="const")

    def _record(self, value, parents, backward_fn, op) -> DiffNode:
        node = DiffNode(self, value, parents, backward_fn, op)
        self.nodes.append(node)
        return node


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, DiffNode):
            return x.tape
    raise ContractError("at least one operand must be a DiffNode")


def _as_node(tape: Tape, x) -> DiffNode:
    return x if isinstance(x, DiffNode) else tape.const(x)


def expit(x):
    # exact identity, overflow-free and faster than the exp form
    return 0.5 + 0.5 * np.tanh(0.5 * x)


def _acc(node: DiffNode, g) -> None:
    # never mutate in place: a gradient array may be shared between nodes
    node._grad = g if node._grad is None else node._grad + g


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast(op_kind, a: DiffNode, b: DiffNode):
    if a.value.shape == b.value.shape:
        return a.value.shape
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op_kind, a.shape, b.shape) from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> DiffNode:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _broadcast("add", a, b)

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, _unbroadcast(g, b.shape))

    return tape._record(a.value + b.value, (a, b), back, "add")


def sub(a, b) -> DiffNode:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _broadcast("sub", a, b)

    def back(g):
        _acc(a, _unbroadcast(g, a.shape))
        _acc(b, -_unbroadcast(g, b.shape))

    return tape._record(a.value - b.value, (a, b), back, "sub")


def mul(a, b) -> DiffNode:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    _broadcast("mul", a, b)

    def back(g):
        _acc(a, _unbroadcast(g * b.value, a.shape))
        _acc(b, _unbroadcast(g * a.value, b.shape))

    return tape._record(a.value * b.value, (a, b), back, "mul")


def neg(a: DiffNode) -> DiffNode:
    def back(g):
        _acc(a, -g)

    return a.tape._record(-a.value, (a,), back, "neg")


def square(a: DiffNode) -> DiffNode:
    def back(g):
        _acc(a, 2.0 * a.value * g)

    return a.tape._record(a.value * a.value, (a,), back, "square")


def sigmoid(a: DiffNode) -> DiffNode:
    out = expit(a.value)

    def back(g):
        _acc(a, g * out * (1.0 - out))

    return a.tape._record(out, (a,), back, "sigmoid")


def tanh(a: DiffNode) -> DiffNode:
    out = np.tanh(a.value)

    def back(g):
        _acc(a, g * (1.0 - out * out))

    return a.tape._record(out, (a,), back, "tanh")


def exp(a: DiffNode) -> DiffNode:
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    if not np.all(np.isfinite(out)):
        raise DomainError(f"exp overflow: max input {np.max(a.value):.6g}")

    def back(g):
        _acc(a, g * out)

    return a.tape._record(out, (a,), back, "exp")


def log(a: DiffNode) -> DiffNode:
    if np.any(a.value <= 0):
        raise DomainError(f"log of non-positive value (min {np.min(a.value):.6g})")
    out = np.log(a.value)

    def back(g):
        _acc(a, g / a.value)

    return a.tape._record(out, (a,), back, "log")


def softplus(a: DiffNode) -> DiffNode:
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def back(g):
        _acc(a, g * expit(x))

    return a.tape._record(out, (a,), back, "softplus")


def clip(a: DiffNode, lo: float = -np.inf, hi: float = np.inf) -> DiffNode:
    """Clamp to [lo, hi]; gradient is zero wherever the clamp is active."""
    out = np.clip(a.value, lo, hi)

    def back(g):
        _acc(a, g * ((a.value >= lo) & (a.value <= hi)))

    return a.tape._record(out, (a,), back, "clip")


# ---------------------------------------------------------------- linear algebra

def matmul(a, b) -> DiffNode:
    tape = _tape_of(a, b)
    a, b = _as_node(tape, a), _as_node(tape, b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def back(g):
        _acc(a, g @ b.value.T)
        _acc(b, a.value.T @ g)

    return tape._record(a.value @ b.value, (a, b), back, "matmul")


def affine(x: DiffNode, weight: DiffNode, bias: DiffNode) -> DiffNode:
    """``x @ weight + bias`` for x of shape (n, k), weight (k, m), bias (m,)."""
    if (x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[0]
            or bias.shape != (weight.shape[1],)):
        raise ShapeError("affine", x.shape, weight.shape, bias.shape)

    def back(g):
        _acc(x, g @ weight.value.T)
        _acc(weight, x.value.T @ g)
        _acc(bias, g.sum(axis=0))

    return x.tape._record(x.value @ weight.value + bias.value, (x, weight, bias), back, "affine")


def dense_tanh(x: DiffNode, weight: DiffNode, bias: DiffNode, mask=None) -> DiffNode:
    """``tanh(x @ weight + bias) * mask`` as one node (mask is a constant array)."""
    if (x.value.ndim != 2 or weight.value.ndim != 2 or x.shape[1] != weight.shape[0]
            or bias.shape != (weight.shape[1],)):
        raise ShapeError("dense_tanh", x.shape, weight.shape, bias.shape)
    act = np.tanh(x.value @ weight.value + bias.value)
    out = act if mask is None else act * mask

    def back(g):
        if mask is not None:
            g = g * mask
        d = g * (1.0 - act * act)
        _acc(x, d @ weight.value.T)
        _acc(weight, x.value.T @ d)
        _acc(bias, d.sum(axis=0))

    return x.tape._record(out, (x, weight, bias), back, "dense_tanh")


def lstm_cell(x: DiffNode, h: DiffNode, c: DiffNode, weight: DiffNode, bias: DiffNode) -> DiffNode:
    """One LSTM step; returns [h_new, c_new] concatenated on the last axis.

    ``weight`` maps [x, h] to the gate blocks (input, forget, output,
    candidate), each of width m = h.shape[1].
    """
    m = h.shape[-1]
    k = x.shape[-1]
    if (x.value.ndim != 2 or h.shape != c.shape or weight.shape != (k + m, 4 * m)
            or bias.shape != (4 * m,) or x.shape[0] != h.shape[0]):
        raise ShapeError("lstm_cell", x.shape, h.shape, c.shape, weight.shape, bias.shape)
    xh = np.concatenate([x.value, h.value], axis=1)
    gates = xh @ weight.value + bias.value
    sig = expit(gates[:, : 3 * m])
    i, f, o = sig[:, :m], sig[:, m: 2 * m], sig[:, 2 * m:]
    cand = np.tanh(gates[:, 3 * m:])
    c_new = f * c.value + i * cand
    tc = np.tanh(c_new)
    h_new = o * tc

    def back(g):
        gh, gc = g[:, :m], g[:, m:]
        dc = gc + gh * o * (1.0 - tc * tc)
        dgates = np.concatenate([dc * cand * i * (1.0 - i),
                                 dc * c.value * f * (1.0 - f),
                                 gh * tc * o * (1.0 - o),
                                 dc * i * (1.0 - cand * cand)], axis=1)
        _acc(weight, xh.T @ dgates)
        _acc(bias, dgates.sum(axis=0))
        dxh = dgates @ weight.value.T
        _acc(x, dxh[:, :k])
        _acc(h, dxh[:, k:])
        _acc(c, dc * f)

    return x.tape._record(np.concatenate([h_new, c_new], axis=1), (x, h, c, weight, bias), back, "lstm_cell")


def concat(nodes: Sequence[DiffNode], axis: int = -1) -> DiffNode:
    nodes = list(nodes)
    if not nodes:
        raise ContractError("concat needs at least one operand")
    tape = nodes[0].tape
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[n.shape for n in nodes]) from None
    bounds = np.cumsum([0] + [n.shape[axis] for n in nodes])

    def back(g):
        for n, lo, hi in zip(nodes, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _acc(n, g[tuple(idx)])

    return tape._record(out, tuple(nodes), back, "concat")


def take(a: DiffNode, start: int, stop: int, axis: int = -1) -> DiffNode:
    """Contiguous slice along ``axis`` (the inverse of concat)."""
    n = a.shape[axis]
    if not 0 <= start < stop <= n:
        raise ShapeError("take", a.shape, (start, stop))
    idx = [slice(None)] * a.value.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def back(g):
        full = np.zeros(a.value.shape)
        full[idx] = g
        _acc(a, full)

    return a.tape._record(a.value[idx], (a,), back, "take")


# ---------------------------------------------------------------- reductions

def sum(a: DiffNode, axis: int | None = None) -> DiffNode:  # noqa: A001
    out = np.asarray(a.value.sum(axis=axis))

    def back(g):
        if axis is None:
            _acc(a, np.broadcast_to(g, a.value.shape))
        else:
            _acc(a, np.broadcast_to(np.expand_dims(g, axis), a.value.shape))

    return a.tape._record(out, (a,), back, "sum")


def mean(a: DiffNode, axis: int | None = None) -> DiffNode:
    count = a.value.size if axis is None else a.shape[axis]
    return mul(sum(a, axis), 1.0 / count)


# ---------------------------------------------------------------- backward pass

def backward(tape: Tape, root: DiffNode) -> dict[int, np.ndarray]:
    """Propagate d(root)/d(node) to every node recorded before ``root``.

    Returns a map from node id to gradient and leaves each node's ``grad``
    filled in. Nodes that ``root`` does not depend on get a zero gradient.
    """
    if root.value.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    nodes = tape.nodes
    for node in nodes:
        node._grad = None
    root._grad = np.ones_like(root.value)
    stop = nodes.index(root) if nodes[-1] is not root else len(nodes) - 1
    for node in reversed(nodes[: stop + 1]):
        if node.backward_fn is not None and node._grad is not None:
            node.backward_fn(node._grad)
    return GradientMap(nodes)


class GradientMap(Mapping):
    """Read-only id -> gradient view; arrays are materialised on lookup."""

    def __init__(self, nodes):
        self._nodes = {node.id: node for node in nodes}

    def __getitem__(self, node_id):
        return self._nodes[node_id].grad

    def __iter__(self):
        return iter(self._nodes)

    def __len__(self):
        return len(self._nodes)
