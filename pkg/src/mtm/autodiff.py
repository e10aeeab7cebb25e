"""Tape-based reverse-mode automatic differentiation over float64 arrays.

A :class:`Graph` records nodes in creation order, so the tape is already a
topological order. ``backward`` walks it in reverse. With
``retain_higher_order=True`` every adjoint is itself built from graph
operations, which makes the returned gradients ordinary nodes that a later
``backward`` call can differentiate again (needed for MAML meta-gradients).

Models are composed from the eleven primitives in :data:`PRIMITIVES`. Two
structural helpers (``reshape`` and ``softmax``) exist only so that adjoints
can be expressed as graph operations; each has its own verified adjoint.
"""
from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np

from . import kernels

PRIMITIVES = frozenset(
    {
        "matmul",
        "add",
        "multiply",
        "subtract",
        "scale",
        "tanh",
        "relu",
        "mean",
        "gather",
        "softmax_xent",
        "sum",
    }
)
HELPERS = frozenset({"reshape", "softmax"})
LEAVES = frozenset({"param", "const"})


class AutodiffError(ValueError):
    pass


class ShapeError(AutodiffError):
    pass


class NonFiniteError(FloatingPointError):
    """A node produced NaN or Inf."""


@dataclass(slots=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    attrs: dict = field(default_factory=dict)


class Tensor:
    """Handle to one node of a :class:`Graph`."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: Graph, node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def op(self) -> str:
        return self.graph.nodes[self.id].op

    def __repr__(self):
        return f"Tensor(id={self.id}, op={self.op}, shape={self.shape})"

    def __add__(self, other):
        return self.graph.add(self, other)

    def __radd__(self, other):
        return self.graph.add(other, self)

    def __sub__(self, other):
        return self.graph.subtract(self, other)

    def __rsub__(self, other):
        return self.graph.subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.graph.scale(self, other)
        return self.graph.multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return self.graph.scale(self, -1.0)

    def __matmul__(self, other):
        return self.graph.matmul(self, other)

    def tanh(self):
        return self.graph.tanh(self)

    def relu(self):
        return self.graph.relu(self)

    def sum(self, axis=None, keepdims=False):
        return self.graph.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis):
        return self.graph.mean(self, axis)


# --------------------------------------------------------------------------
# forward rules


def _broadcast(a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _fwd_matmul(vals, attrs):
    a, b = vals
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    a = a.T if attrs.get("ta") else a
    b = b.T if attrs.get("tb") else b
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def _fwd_add(vals, attrs):
    _broadcast(*vals)
    return vals[0] + vals[1]


def _fwd_subtract(vals, attrs):
    _broadcast(*vals)
    return vals[0] - vals[1]


def _fwd_multiply(vals, attrs):
    _broadcast(*vals)
    return vals[0] * vals[1]


def _check_axis(x, axis):
    axes = (axis,) if isinstance(axis, int) else axis
    for ax in axes:
        if not -x.ndim <= ax < x.ndim:
            raise ShapeError(f"axis {ax} out of range for shape {x.shape}")


def _fwd_mean(vals, attrs):
    (x,) = vals
    _check_axis(x, attrs["axis"])
    return x.mean(axis=attrs["axis"])


def _fwd_sum(vals, attrs):
    (x,) = vals
    axis = attrs.get("axis")
    if axis is not None:
        _check_axis(x, axis)
    return x.sum(axis=axis, keepdims=attrs.get("keepdims", False))


def _fwd_gather(vals, attrs):
    (table,) = vals
    ids = attrs["ids"]
    if table.ndim != 2:
        raise ShapeError(f"gather needs a 2-D table, got {table.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"gather ids outside [0, {table.shape[0]}) for table {table.shape}")
    return kernels.gather_rows(table, ids)


def _fwd_softmax_xent(vals, attrs):
    (logits,) = vals
    labels = attrs["labels"]
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax_xent needs (N, C) logits and (N,) labels, got {logits.shape} and {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise ShapeError(f"labels outside [0, {logits.shape[1]})")
    loss, probs = kernels.softmax_xent(logits, labels)
    attrs["probs"] = probs
    return np.asarray(loss)


def _fwd_reshape(vals, attrs):
    (x,) = vals
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"cannot reshape {x.shape} to {shape}")
    return x.reshape(shape)


def _fwd_softmax(vals, attrs):
    (x,) = vals
    if x.ndim != 2:
        raise ShapeError(f"softmax needs a 2-D input, got {x.shape}")
    return kernels.softmax_rows(x)


_FORWARD: dict[str, Callable] = {
    "matmul": _fwd_matmul,
    "add": _fwd_add,
    "subtract": _fwd_subtract,
    "multiply": _fwd_multiply,
    "scale": lambda vals, attrs: vals[0] * attrs["c"],
    "tanh": lambda vals, attrs: np.tanh(vals[0]),
    "relu": lambda vals, attrs: np.maximum(vals[0], 0.0),
    "mean": _fwd_mean,
    "sum": _fwd_sum,
    "gather": _fwd_gather,
    "softmax_xent": _fwd_softmax_xent,
    "reshape": _fwd_reshape,
    "softmax": _fwd_softmax,
}
_ARITY = {"matmul": 2, "add": 2, "subtract": 2, "multiply": 2}


# --------------------------------------------------------------------------
# adjoint operand backends


class _Ops:
    """Operations adjoints are written against.

    Subclasses either compute on raw arrays or record graph nodes.
    """

    def sum_to(self, g, shape):
        gshape = self.shape(g)
        if gshape == shape:
            return g
        lead = len(gshape) - len(shape)
        axes = tuple(range(lead)) + tuple(
            lead + i for i, n in enumerate(shape) if n == 1 and gshape[lead + i] != 1
        )
        if axes:
            g = self.sum(g, axes, keepdims=True)
        return self.reshape(g, shape)

    def broadcast_to(self, g, shape):
        if self.shape(g) == shape:
            return g
        return self.add(self.zeros(shape), g)


class _ArrayOps(_Ops):
    def __init__(self, graph):
        self.graph = graph

    def val(self, i):
        return self.graph.nodes[i].value

    shape = staticmethod(np.shape)

    def const(self, a):
        return a

    def ones(self, shape):
        return np.ones(shape)

    def zeros(self, shape):
        return np.zeros(shape)

    def add(self, a, b):
        return a + b

    def sub(self, a, b):
        return a - b

    def mul(self, a, b):
        return a * b

    def scale(self, a, c):
        return a * c

    def matmul(self, a, b, ta=False, tb=False):
        return (a.T if ta else a) @ (b.T if tb else b)

    def sum(self, a, axis, keepdims=False):
        return a.sum(axis=axis, keepdims=keepdims)

    def reshape(self, a, shape):
        return np.reshape(a, shape)

    def broadcast_to(self, g, shape):
        return np.broadcast_to(g, shape).copy()

    def softmax(self, a):
        return kernels.softmax_rows(a)

    def scatter_rows(self, ids, g, n_rows):
        return kernels.scatter_add_rows(ids, g, n_rows)

    def xent_probs(self, i):
        return self.graph.nodes[i].attrs["probs"]


class _GraphOps(_Ops):
    def __init__(self, graph):
        self.graph = graph

    def val(self, i):
        return Tensor(self.graph, i)

    @staticmethod
    def shape(t):
        return t.shape

    def const(self, a):
        return self.graph.const(a)

    def ones(self, shape):
        return self.graph.const(np.ones(shape))

    def zeros(self, shape):
        return self.graph.const(np.zeros(shape))

    def add(self, a, b):
        return self.graph.add(a, b)

    def sub(self, a, b):
        return self.graph.subtract(a, b)

    def mul(self, a, b):
        return self.graph.multiply(a, b)

    def scale(self, a, c):
        return self.graph.scale(a, c)

    def matmul(self, a, b, ta=False, tb=False):
        return self.graph.matmul(a, b, ta=ta, tb=tb)

    def sum(self, a, axis, keepdims=False):
        return self.graph.sum(a, axis=axis, keepdims=keepdims)

    def reshape(self, a, shape):
        return self.graph.reshape(a, shape)

    def softmax(self, a):
        return self.graph.apply("softmax", a)

    def scatter_rows(self, ids, g, n_rows):
        ids = np.asarray(ids).reshape(-1)
        onehot = np.zeros((ids.size, n_rows))
        onehot[np.arange(ids.size), ids] = 1.0
        g2 = self.reshape(g, (ids.size, g.shape[-1]))
        return self.matmul(self.const(onehot), g2, ta=True)

    def xent_probs(self, i):
        return self.softmax(Tensor(self.graph, self.graph.nodes[i].inputs[0]))


# --------------------------------------------------------------------------
# adjoints: (ops, node_id, node, input_index, upstream) -> contribution


def _in_shape(ops, node, k):
    return ops.graph.nodes[node.inputs[k]].value.shape


def _adj_add(ops, i, node, k, g):
    return ops.sum_to(g, _in_shape(ops, node, k))


def _adj_subtract(ops, i, node, k, g):
    g = g if k == 0 else ops.scale(g, -1.0)
    return ops.sum_to(g, _in_shape(ops, node, k))


def _adj_multiply(ops, i, node, k, g):
    other = ops.val(node.inputs[1 - k])
    return ops.sum_to(ops.mul(g, other), _in_shape(ops, node, k))


def _adj_matmul(ops, i, node, k, g):
    a, b = (ops.val(j) for j in node.inputs)
    ta, tb = node.attrs.get("ta", False), node.attrs.get("tb", False)
    if k == 0:
        if ta:
            return ops.matmul(b, g, ta=tb, tb=True)
        return ops.matmul(g, b, tb=not tb)
    if tb:
        return ops.matmul(g, a, ta=True, tb=ta)
    return ops.matmul(a, g, ta=not ta)


def _adj_tanh(ops, i, node, k, g):
    y = ops.val(i)
    return ops.mul(g, ops.sub(ops.ones(node.value.shape), ops.mul(y, y)))


def _adj_relu(ops, i, node, k, g):
    mask = (ops.graph.nodes[node.inputs[0]].value > 0).astype(np.float64)
    return ops.mul(g, ops.const(mask))


def _keep_shape(in_shape, axis):
    axes = (axis,) if isinstance(axis, int) else (tuple(range(len(in_shape))) if axis is None else axis)
    axes = {ax % len(in_shape) for ax in axes} if in_shape else set()
    return tuple(1 if d in axes else n for d, n in enumerate(in_shape))


def _adj_sum(ops, i, node, k, g):
    in_shape = _in_shape(ops, node, 0)
    g = ops.reshape(g, _keep_shape(in_shape, node.attrs.get("axis")))
    return ops.broadcast_to(g, in_shape)


def _adj_mean(ops, i, node, k, g):
    in_shape = _in_shape(ops, node, 0)
    g = ops.reshape(g, _keep_shape(in_shape, node.attrs["axis"]))
    n = in_shape[node.attrs["axis"]]
    return ops.scale(ops.broadcast_to(g, in_shape), 1.0 / n)


def _adj_gather(ops, i, node, k, g):
    n_rows = _in_shape(ops, node, 0)[0]
    return ops.scatter_rows(node.attrs["ids"], g, n_rows)


def _adj_softmax_xent(ops, i, node, k, g):
    logits_shape = _in_shape(ops, node, 0)
    n = logits_shape[0]
    onehot = np.zeros(logits_shape)
    onehot[np.arange(n), node.attrs["labels"]] = 1.0
    diff = ops.scale(ops.sub(ops.xent_probs(i), ops.const(onehot)), 1.0 / n)
    return ops.mul(diff, g)


def _adj_reshape(ops, i, node, k, g):
    return ops.reshape(g, _in_shape(ops, node, 0))


def _adj_softmax(ops, i, node, k, g):
    s = ops.val(i)
    sg = ops.mul(s, g)
    return ops.sub(sg, ops.mul(s, ops.sum(sg, 1, keepdims=True)))


_ADJOINT: dict[str, Callable] = {
    "matmul": _adj_matmul,
    "add": _adj_add,
    "subtract": _adj_subtract,
    "multiply": _adj_multiply,
    "scale": lambda ops, i, node, k, g: ops.scale(g, node.attrs["c"]),
    "tanh": _adj_tanh,
    "relu": _adj_relu,
    "mean": _adj_mean,
    "sum": _adj_sum,
    "gather": _adj_gather,
    "softmax_xent": _adj_softmax_xent,
    "reshape": _adj_reshape,
    "softmax": _adj_softmax,
}


# --------------------------------------------------------------------------


class GradientMap(Mapping):
    """Read-only map from node id to gradient.

    Values are ``Tensor`` nodes when produced with ``retain_higher_order``,
    otherwise read-only arrays. Lookup accepts a node id or a ``Tensor``.
    """

    def __init__(self, grads: dict, higher_order: bool):
        self._grads = grads
        self.higher_order = higher_order

    def __getitem__(self, key):
        return self._grads[key.id if isinstance(key, Tensor) else key]

    def __iter__(self):
        return iter(self._grads)

    def __len__(self):
        return len(self._grads)

    def array(self, key) -> np.ndarray:
        g = self[key]
        return g.value if isinstance(g, Tensor) else g


class Graph:
    """Append-only computation tape."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.higher_order = False

    def __len__(self):
        return len(self.nodes)

    def _push(self, op, inputs, value, attrs):
        value = np.asarray(value, dtype=np.float64)
        node_id = len(self.nodes)
        if not np.isfinite(value).all():
            raise NonFiniteError(f"node {node_id} ({op}) produced non-finite values")
        self.nodes.append(Node(op, inputs, value, attrs))
        return Tensor(self, node_id)

    def param(self, value) -> Tensor:
        """Differentiable leaf (copied)."""
        return self._push("param", (), np.array(value, dtype=np.float64), {})

    def const(self, value) -> Tensor:
        return self._push("const", (), np.array(value, dtype=np.float64), {})

    def _as_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise AutodiffError(f"tensor {x.id} belongs to a different graph")
            return x
        return self.const(x)

    def apply(self, op: str, *inputs, **attrs) -> Tensor:
        """Record ``op`` applied to ``inputs``; returns the new node."""
        if op not in _FORWARD:
            raise AutodiffError(f"unknown operation {op!r}")
        if len(inputs) != _ARITY.get(op, 1):
            raise AutodiffError(f"{op} takes {_ARITY.get(op, 1)} inputs, got {len(inputs)}")
        tensors = [self._as_tensor(x) for x in inputs]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            value = _FORWARD[op]([t.value for t in tensors], attrs)
        return self._push(op, tuple(t.id for t in tensors), value, attrs)

    # thin wrappers, one per operation

    def matmul(self, a, b, ta=False, tb=False):
        return self.apply("matmul", a, b, ta=ta, tb=tb)

    def add(self, a, b):
        return self.apply("add", a, b)

    def subtract(self, a, b):
        return self.apply("subtract", a, b)

    def multiply(self, a, b):
        return self.apply("multiply", a, b)

    def scale(self, a, c: float):
        return self.apply("scale", a, c=float(c))

    def tanh(self, a):
        return self.apply("tanh", a)

    def relu(self, a):
        return self.apply("relu", a)

    def mean(self, a, axis: int):
        return self.apply("mean", a, axis=axis)

    def sum(self, a, axis=None, keepdims=False):
        return self.apply("sum", a, axis=axis, keepdims=keepdims)

    def gather(self, table, ids):
        return self.apply("gather", table, ids=np.asarray(ids, dtype=np.int64))

    def softmax_xent(self, logits, labels):
        return self.apply("softmax_xent", logits, labels=np.asarray(labels, dtype=np.int64))

    def reshape(self, a, shape):
        return self.apply("reshape", a, shape=tuple(shape))

    def backward(self, loss, wrt, retain_higher_order: bool = False) -> GradientMap:
        """Gradients of scalar ``loss`` with respect to each node in ``wrt``.

        Nodes that do not influence ``loss`` get exact zeros.
        """
        loss = self._node_tensor(loss)
        if loss.value.size != 1:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        wanted = [self._node_tensor(w).id for w in wrt]
        wanted_set = set(wanted)

        # nodes on a path from some wrt node to the loss
        reach = bytearray(loss.id + 1)
        for i in range(loss.id + 1):
            if i in wanted_set or any(reach[j] for j in self.nodes[i].inputs):
                reach[i] = 1

        ops = _GraphOps(self) if retain_higher_order else _ArrayOps(self)
        if retain_higher_order:
            self.higher_order = True
        adj = {loss.id: ops.ones(loss.shape)} if reach[loss.id] else {}
        found = {}
        for i in range(loss.id, -1, -1):
            g = adj.pop(i, None)
            if g is None:
                continue
            if i in wanted_set:
                found[i] = g
            node = self.nodes[i]
            if node.op in LEAVES:
                continue
            for k, j in enumerate(node.inputs):
                if not reach[j]:
                    continue
                contrib = _ADJOINT[node.op](ops, i, node, k, g)
                adj[j] = ops.add(adj[j], contrib) if j in adj else contrib

        grads = {}
        for w in wanted:
            g = found.get(w)
            if g is None:
                g = ops.zeros(self.nodes[w].value.shape)
            if not retain_higher_order:
                g = np.array(g, dtype=np.float64)
                g.flags.writeable = False
            grads[w] = g
        return GradientMap(grads, retain_higher_order)

    def _node_tensor(self, x) -> Tensor:
        if isinstance(x, Tensor):
            if x.graph is not self:
                raise AutodiffError(f"tensor {x.id} belongs to a different graph")
            return x
        if not isinstance(x, (int, np.integer)) or not 0 <= x < len(self.nodes):
            raise AutodiffError(f"node id {x!r} not in graph")
        return Tensor(self, int(x))


def finite_difference_oracle(loss_fn, params, epsilon: float = 1e-5):
    """Central-difference gradient of ``loss_fn`` at ``params``.

    ``params`` is an array or a mapping of name to array; the result has the
    same structure. ``loss_fn`` receives fresh copies on every probe.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    if isinstance(params, Mapping):
        base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

        def call(name, flat_idx, delta):
            probe = {k: v.copy() for k, v in base.items()}
            probe[name].reshape(-1)[flat_idx] += delta
            return _finite(loss_fn(probe))

        out = {}
        for name, v in base.items():
            g = np.empty(v.size)
            for idx in range(v.size):
                g[idx] = (call(name, idx, epsilon) - call(name, idx, -epsilon)) / (2 * epsilon)
            out[name] = g.reshape(v.shape)
        return out

    base = np.array(params, dtype=np.float64)
    g = np.empty(base.size)
    for idx in range(base.size):
        hi, lo = base.copy(), base.copy()
        hi.reshape(-1)[idx] += epsilon
        lo.reshape(-1)[idx] -= epsilon
        g[idx] = (_finite(loss_fn(hi)) - _finite(loss_fn(lo))) / (2 * epsilon)
    return g.reshape(base.shape)


def _finite(x) -> float:
    x = float(x)
    if not np.isfinite(x):
        raise NonFiniteError("loss is non-finite at a finite-difference probe")
    return x
