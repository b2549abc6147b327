"""Dense tensors with tape-based reverse-mode differentiation.

Values are plain numpy arrays. A :class:`Graph` records every operation
eagerly (forward values are computed on construction) and
:meth:`Graph.backward` replays the tape in reverse creation order to
produce exact gradients for the nodes that were marked.

Example::

    g = Graph()
    x = g.variable(np.array([3.0]), mark=True)
    y = mul(x, x)
    grads = g.backward(y)
    grads[x.id]  # array([6.])
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NonFiniteError

_GELU_C = math.sqrt(2.0 / math.pi)


class Node:
    """One value on the tape: op kind, parent ids and the cached output."""

    __slots__ = ("graph", "id", "op", "parents", "value", "_backward")

    def __init__(self, graph, op, parents, value, backward=None):
        self.graph = graph
        self.id = len(graph.nodes)
        self.op = op
        self.parents = tuple(parents)
        self.value = value
        self._backward = backward
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(id={self.id}, op={self.op!r}, shape={self.shape})"


class Graph:
    """Append-only computation tape.

    All nodes of one graph share ``dtype``; inputs are cast on entry.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.marked: set[int] = set()

    def constant(self, value, op="constant"):
        arr = np.array(value, dtype=self.dtype, copy=True)
        _check_finite(arr, op)
        arr.setflags(write=False)
        return Node(self, op, (), arr)

    def variable(self, value, mark=False):
        node = self.constant(value, op="variable")
        if mark:
            self.mark(node)
        return node

    def mark(self, node: Node):
        if node.graph is not self:
            raise ContractError("node belongs to a different graph")
        self.marked.add(node.id)

    def backward(self, output: Node) -> dict[int, np.ndarray]:
        """Gradients of the scalar ``output`` for every marked node.

        Marked nodes with no path to ``output`` receive zeros.
        """
        if output.graph is not self:
            raise ContractError("output belongs to a different graph")
        if output.value.size != 1 or output.value.ndim != 1:
            raise ContractError(
                f"backward needs a shape-[1] output, got {output.shape}"
            )
        if not self.marked:
            raise ContractError("no nodes are marked for differentiation")

        grads: dict[int, np.ndarray] = {output.id: np.ones(1, dtype=self.dtype)}
        for node in reversed(self.nodes[: output.id + 1]):
            g = grads.get(node.id)
            if g is None or node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None:
                    continue
                pg = pg.astype(self.dtype, copy=False)
                if parent.id in grads:
                    grads[parent.id] = grads[parent.id] + pg
                else:
                    grads[parent.id] = pg
            if node.id not in self.marked:
                del grads[node.id]

        return {
            i: grads.get(i, np.zeros_like(self.nodes[i].value))
            for i in sorted(self.marked)
        }


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op} produced non-finite values")


def _emit(graph, op, parents, value, backward):
    value = np.asarray(value, dtype=graph.dtype)
    _check_finite(value, op)
    value.setflags(write=False)
    return Node(graph, op, parents, value, backward)


def _graph_of(*nodes):
    graph = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not graph:
            raise ContractError("operands belong to different graphs")
    return graph


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


# --- linear algebra ---------------------------------------------------------

def matmul(a: Node, b: Node) -> Node:
    """Matrix product over the last two axes; leading axes broadcast."""
    graph = _graph_of(a, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise DimensionError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents differ: {a.shape} x {b.shape}")
    av, bv = a.value, b.value

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _emit(graph, "matmul", (a, b), av @ bv, backward)


def transpose(x: Node, axes: Sequence[int]) -> Node:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _emit(
        x.graph, "transpose", (x,), np.transpose(x.value, axes),
        lambda g: (np.transpose(g, inverse),),
    )


def reshape(x: Node, shape: Sequence[int]) -> Node:
    original = x.shape
    try:
        out = x.value.reshape(tuple(shape))
    except ValueError:
        raise DimensionError(f"cannot reshape {original} to {tuple(shape)}")
    return _emit(x.graph, "reshape", (x,), out, lambda g: (g.reshape(original),))


def take(x: Node, index, axis: int = 0) -> Node:
    """Gather slices of ``x`` along ``axis`` by a 1-d index; repeats accumulate."""
    index = np.asarray(index, dtype=np.intp)
    if index.ndim != 1:
        raise DimensionError("take needs a 1-d index")
    extent = x.shape[axis]
    if index.size and (index.min() < -extent or index.max() >= extent):
        raise DimensionError(f"take: index out of range for extent {extent}")
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        moved = np.moveaxis(out, axis, 0)
        np.add.at(moved, index.reshape(-1), np.moveaxis(g, axis, 0).reshape(
            (index.size,) + moved.shape[1:]))
        return (out,)

    return _emit(x.graph, "take", (x,), np.take(x.value, index, axis=axis), backward)


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    graph = _graph_of(*nodes)
    try:
        out = np.concatenate([n.value for n in nodes], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {exc}")
    bounds = np.cumsum([n.shape[axis] for n in nodes])[:-1]
    return _emit(graph, "concat", nodes, out,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def sum(x: Node, axis=None, keepdims=False) -> Node:  # noqa: A001
    """Sum over ``axis``; a full reduction returns shape [1]."""
    shape = x.shape
    if axis is None:
        out = np.array([x.value.sum()])
        return _emit(x.graph, "sum", (x,), out,
                     lambda g: (np.broadcast_to(g.reshape(()), shape).copy(),))
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(x.graph, "sum", (x,), out, backward)


def mean(x: Node, axis=None, keepdims=False) -> Node:
    count = x.value.size if axis is None else x.shape[axis]
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


# --- elementwise ------------------------------------------------------------

def add(a: Node, b) -> Node:
    if not isinstance(b, Node):
        return _emit(a.graph, "add", (a,), a.value + b, lambda g: (g,))
    graph = _graph_of(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _emit(graph, "add", (a, b), a.value + b.value,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Node, b) -> Node:
    if not isinstance(b, Node):
        return scale(a, b)
    graph = _graph_of(a, b)
    _broadcast_shape(a, b, "mul")
    av, bv = a.value, b.value
    return _emit(graph, "mul", (a, b), av * bv,
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def scale(x: Node, factor: float) -> Node:
    factor = float(factor)
    return _emit(x.graph, "scale", (x,), x.value * factor, lambda g: (g * factor,))


def clamp_nonneg(x: Node) -> Node:
    """max(x, 0); the gradient at exactly 0 is 0."""
    positive = x.value > 0
    return _emit(x.graph, "clamp_nonneg", (x,), np.where(positive, x.value, 0),
                 lambda g: (g * positive,))


def gelu(x: Node) -> Node:
    """Tanh-approximated GELU."""
    v = x.value.astype(np.float64)
    inner = _GELU_C * (v + 0.044715 * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)
    dout = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * _GELU_C * (1.0 + 3 * 0.044715 * v**2)
    return _emit(x.graph, "gelu", (x,), out, lambda g: (g * dout,))


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "scale": scale,
    "clamp_nonneg": clamp_nonneg,
    "gelu": gelu,
}


def elementwise(kind: str, *args) -> Node:
    """Dispatch to one of ``add``, ``mul``, ``scale``, ``clamp_nonneg``, ``gelu``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# --- normalisation ----------------------------------------------------------

def softmax_lastdim(x: Node) -> Node:
    if x.shape[-1] < 1:
        raise DimensionError("softmax over an empty axis")
    shifted = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _emit(x.graph, "softmax", (x,), p, backward)


@dataclass(frozen=True)
class LayerNormStats:
    """Per-token statistics of one layer norm: ``std`` is sqrt(var + eps)."""

    mean: np.ndarray
    std: np.ndarray


def layer_norm(x: Node, gain: Node, bias: Node, eps: float = 1e-5):
    """Normalise the last axis with population variance.

    Returns ``(output_node, LayerNormStats)``.
    """
    if eps < 0:
        raise ContractError("layer_norm eps must be nonnegative")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm gain/bias must have shape ({d},)")
    graph = _graph_of(x, gain, bias)
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    centred = v - mu
    var = (centred**2).mean(axis=-1, keepdims=True)
    std = np.sqrt(var + np.asarray(eps, dtype=v.dtype))
    xhat = centred / std
    gv = gain.value

    def backward(g):
        gx_hat = g * gv
        gx = (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
              - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)) / std
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    out = _emit(graph, "layer_norm", (x, gain, bias), xhat * gv + bias.value, backward)
    stats = LayerNormStats(mean=mu[..., 0].copy(), std=std[..., 0].copy())
    return out, stats


# --- test oracle ------------------------------------------------------------

def finite_diff_grad(f: Callable[[np.ndarray], float], x, eps: float = 1e-3) -> np.ndarray:
    """Central-difference gradient of a scalar function, in float64."""
    if eps <= 0:
        raise ContractError("finite difference step must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x))
        flat[i] = orig - eps
        lo = float(f(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad
