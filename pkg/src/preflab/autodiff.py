"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every forward pass records its nodes on a fresh ``Graph``
tape, and ``Graph.backward`` replays that tape in exact reverse creation
order. Accumulation order is therefore deterministic, and two backward
passes over identical graphs produce bit-identical gradients.

Only scalar <-> array broadcasting is supported. Anything richer must be
spelled out with explicit shapes (``reshape``, ``add_bias``, ``matmul``),
which removes a whole class of silently misaligned operands.

Operands that are not ``Node`` instances are treated as untracked
constants: they participate in the forward value but accumulate no
gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


class ShapeMismatchError(ValueError):
    """Operand shapes neither match nor qualify for scalar broadcasting."""

    def __init__(self, op: str, a: tuple, b: tuple):
        super().__init__(f"{op}: incompatible shapes {a} and {b}")
        self.shapes = (a, b)


class IndexBoundsError(IndexError):
    """A gather/lookup index fell outside its axis."""

    def __init__(self, op: str, index: int, size: int):
        super().__init__(f"{op}: index {index} out of bounds for size {size}")
        self.index = index
        self.size = size


# ---------------------------------------------------------------------------
# plain numeric helpers (not graph ops; shared by ops and by callers that
# evaluate without building a graph)
# ---------------------------------------------------------------------------


def softplus_values(z):
    """Stable softplus: log(1 + exp(z)) without overflow for any float64."""
    z = np.asarray(z, dtype=np.float64)
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def sigmoid_values(z):
    """Stable logistic sigmoid."""
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(-np.abs(z))
    return np.where(z >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def log_sigmoid_values(z):
    """Stable log-sigmoid: -softplus(-z)."""
    return -softplus_values(-np.asarray(z, dtype=np.float64))


def logsumexp_values(z):
    """Max-shifted log-sum-exp of a 1-D array."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z)
    return float(m + np.log(np.sum(np.exp(z - m))))


def log_softmax_values(z, axis: int = -1):
    """Max-shifted log-softmax along ``axis``."""
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    shifted = z - m
    lse = np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))
    return shifted - lse


# ---------------------------------------------------------------------------
# graph machinery
# ---------------------------------------------------------------------------


class Node:
    """One value in a computation graph plus a same-shape gradient buffer.

    The gradient buffer materializes lazily (all-zeros on first access), so
    forward-only graphs never allocate one.
    """

    __slots__ = ("value", "_grad", "graph", "_parents", "_backward")

    def __init__(self, graph: "Graph", value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self._grad = None
        self.graph = graph
        self._parents = parents
        self._backward = backward
        graph._nodes.append(self)

    @property
    def grad(self) -> Array:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, value) -> None:
        self._grad = value

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return sub(self, other)

    def __repr__(self):
        return f"Node(shape={self.value.shape})"


class Graph:
    """Tape of nodes for one forward pass.

    Single-threaded per graph; independent graphs may live on separate
    threads since no state is shared between them.
    """

    def __init__(self):
        self._nodes: list[Node] = []

    def __len__(self):
        return len(self._nodes)

    def leaf(self, value) -> Node:
        # copy so later edits to the caller's array cannot alias the tape
        return Node(self, np.array(value, dtype=np.float64))

    def zero_grad(self) -> None:
        for node in self._nodes:
            if node._grad is not None:
                node._grad[...] = 0.0

    def backward(self, root: Node) -> None:
        """Reverse sweep in exact reverse creation order.

        Nodes no gradient has reached contribute exactly zero and are
        skipped; accumulation order is unchanged and deterministic.
        """
        if root.graph is not self:
            raise ValueError("backward: root node belongs to a different graph")
        if root.value.size != 1:
            raise ValueError(
                f"backward: root must be scalar, got shape {root.value.shape}"
            )
        root.grad[...] = 1.0
        for node in reversed(self._nodes):
            if node._backward is not None and node._grad is not None:
                node._backward(node._grad)


def _value(x) -> Array:
    if isinstance(x, Node):
        return x.value
    return np.asarray(x, dtype=np.float64)


def _graph_of(op: str, *operands) -> Graph:
    graph = None
    for x in operands:
        if isinstance(x, Node):
            if graph is None:
                graph = x.graph
            elif x.graph is not graph:
                raise ValueError(f"{op}: operands belong to different graphs")
    if graph is None:
        raise ValueError(f"{op}: at least one operand must be a Node")
    return graph


def _check_elementwise(op: str, va: Array, vb: Array) -> None:
    if va.shape != vb.shape and va.ndim != 0 and vb.ndim != 0:
        raise ShapeMismatchError(op, va.shape, vb.shape)


def _accumulate(x, g) -> None:
    """Add ``g`` into x's gradient, reducing a scalar-broadcast operand."""
    if not isinstance(x, Node):
        return
    if x.value.ndim == 0 and np.ndim(g) != 0:
        x.grad += np.sum(g)
    else:
        x.grad += g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a, b) -> Node:
    va, vb = _value(a), _value(b)
    _check_elementwise("add", va, vb)
    graph = _graph_of("add", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return Node(graph, va + vb, (a, b), backward)


def sub(a, b) -> Node:
    va, vb = _value(a), _value(b)
    _check_elementwise("sub", va, vb)
    graph = _graph_of("sub", a, b)

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return Node(graph, va - vb, (a, b), backward)


def mul(a, b) -> Node:
    va, vb = _value(a), _value(b)
    _check_elementwise("mul", va, vb)
    graph = _graph_of("mul", a, b)

    def backward(g):
        _accumulate(a, g * vb)
        _accumulate(b, g * va)

    return Node(graph, va * vb, (a, b), backward)


def neg(a) -> Node:
    graph = _graph_of("neg", a)

    def backward(g):
        _accumulate(a, -g)

    return Node(graph, -a.value, (a,), backward)


def sum(a, axis: int | None = None) -> Node:  # noqa: A001 - mirrors np.sum
    graph = _graph_of("sum", a)
    value = np.sum(a.value, axis=axis)

    def backward(g):
        if axis is None:
            a.grad += g
        else:
            a.grad += np.expand_dims(g, axis)

    return Node(graph, value, (a,), backward)


def tanh(a) -> Node:
    graph = _graph_of("tanh", a)
    value = np.tanh(a.value)

    def backward(g):
        a.grad += g * (1.0 - value * value)

    return Node(graph, value, (a,), backward)


def log_sigmoid(a) -> Node:
    """log(sigmoid(x)), computed as -softplus(-x); gradient sigmoid(-x)."""
    graph = _graph_of("log_sigmoid", a)
    va = a.value

    def backward(g):
        a.grad += g * sigmoid_values(-va)

    return Node(graph, log_sigmoid_values(va), (a,), backward)


def log_softmax(a, axis: int = -1) -> Node:
    graph = _graph_of("log_softmax", a)
    value = log_softmax_values(a.value, axis=axis)

    def backward(g):
        a.grad += g - np.exp(value) * np.sum(g, axis=axis, keepdims=True)

    return Node(graph, value, (a,), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------


def reshape(a, shape) -> Node:
    graph = _graph_of("reshape", a)
    original = a.value.shape

    def backward(g):
        a.grad += g.reshape(original)

    return Node(graph, a.value.reshape(shape), (a,), backward)


def matmul(a, b) -> Node:
    va, vb = _value(a), _value(b)
    if va.ndim != 2 or vb.ndim != 2 or va.shape[1] != vb.shape[0]:
        raise ShapeMismatchError("matmul", va.shape, vb.shape)
    graph = _graph_of("matmul", a, b)

    def backward(g):
        if isinstance(a, Node):
            a.grad += g @ vb.T
        if isinstance(b, Node):
            b.grad += va.T @ g

    return Node(graph, va @ vb, (a, b), backward)


def add_bias(mat, bias) -> Node:
    """Add a (k,) bias row-wise onto an (n, k) matrix."""
    vm, vb = _value(mat), _value(bias)
    if vm.ndim != 2 or vb.ndim != 1 or vm.shape[1] != vb.shape[0]:
        raise ShapeMismatchError("add_bias", vm.shape, vb.shape)
    graph = _graph_of("add_bias", mat, bias)

    def backward(g):
        if isinstance(mat, Node):
            mat.grad += g
        if isinstance(bias, Node):
            bias.grad += np.sum(g, axis=0)

    return Node(graph, vm + vb[None, :], (mat, bias), backward)


def gather(a, indices) -> Node:
    """Row-aligned selection from a 2-D array: out[i] = a[i, indices[i]]."""
    va = a.value
    idx = np.asarray(indices, dtype=np.intp)
    if va.ndim != 2 or idx.ndim != 1 or idx.shape[0] != va.shape[0]:
        raise ShapeMismatchError("gather", va.shape, idx.shape)
    size = va.shape[1]
    bad = (idx < 0) | (idx >= size)
    if bad.any():
        raise IndexBoundsError("gather", int(idx[bad][0]), size)
    rows = np.arange(va.shape[0])
    graph = _graph_of("gather", a)

    def backward(g):
        np.add.at(a.grad, (rows, idx), g)

    return Node(graph, va[rows, idx], (a,), backward)


def embed_lookup(table, ids) -> Node:
    """Select rows of a (v, d) table by integer id; repeated ids accumulate."""
    vt = table.value
    idx = np.asarray(ids, dtype=np.intp)
    if vt.ndim != 2:
        raise ShapeMismatchError("embed_lookup", vt.shape, idx.shape)
    size = vt.shape[0]
    bad = (idx < 0) | (idx >= size)
    if bad.any():
        raise IndexBoundsError("embed_lookup", int(idx[bad.nonzero()][0]), size)
    flat = idx.reshape(-1)
    graph = _graph_of("embed_lookup", table)

    def backward(g):
        np.add.at(table.grad, flat, g.reshape(-1, vt.shape[1]))

    return Node(graph, vt[idx], (table,), backward)


def slice1d(a, start: int, stop: int) -> Node:
    """Contiguous slice of a 1-D array."""
    va = a.value
    if va.ndim != 1 or not (0 <= start <= stop <= va.shape[0]):
        raise IndexBoundsError("slice1d", stop, va.shape[0])
    graph = _graph_of("slice1d", a)

    def backward(g):
        a.grad[start:stop] += g

    return Node(graph, va[start:stop].copy(), (a,), backward)


def segment_sum(a, start: int, stop: int, mask=None) -> Node:
    """Sum a[start:stop], optionally restricted to mask's true positions.

    ``mask`` is a bool array covering the whole of ``a``; an empty or fully
    masked-out segment sums to 0. Masked-out positions receive no gradient.
    """
    va = a.value
    if va.ndim != 1 or not (0 <= start <= stop <= va.shape[0]):
        raise IndexBoundsError("segment_sum", stop, va.shape[0])
    graph = _graph_of("segment_sum", a)
    if mask is None:
        value = np.sum(va[start:stop])

        def backward(g):
            a.grad[start:stop] += g

    else:
        seg_mask = np.asarray(mask, dtype=bool)[start:stop]
        value = np.sum(va[start:stop][seg_mask])

        def backward(g):
            a.grad[start:stop][seg_mask] += g

    return Node(graph, value, (a,), backward)


def segment_sums(a, bounds, mask=None) -> Node:
    """Masked sums of several [start, stop) segments of a 1-D array.

    Each output entry matches segment_sum on the same bounds and mask
    bit-for-bit (identical per-segment summation). Width-<=1 segments take
    a vectorized path; the general case loops per segment.
    """
    va = a.value
    if va.ndim != 1:
        raise ShapeMismatchError("segment_sums", va.shape, ())
    n = va.shape[0]
    starts = np.fromiter((b[0] for b in bounds), dtype=np.intp, count=len(bounds))
    stops = np.fromiter((b[1] for b in bounds), dtype=np.intp, count=len(bounds))
    if np.any(starts < 0) or np.any(stops < starts) or np.any(stops > n):
        raise IndexBoundsError("segment_sums", int(np.max(stops, initial=0)), n)
    seg_mask = None if mask is None else np.asarray(mask, dtype=bool)
    graph = _graph_of("segment_sums", a)

    if n > 0 and np.all(stops - starts <= 1):
        # token-level segments: a masked pick (sum of 0 or 1 entries)
        idx = np.minimum(starts, n - 1)
        live = stops > starts
        if seg_mask is not None:
            live = live & seg_mask[idx]
        values = np.where(live, va[idx], 0.0)

        def backward(g):
            np.add.at(a.grad, idx[live], g[live])

        return Node(graph, values, (a,), backward)

    values = np.empty(len(bounds), dtype=np.float64)
    for i, (start, stop) in enumerate(bounds):
        if seg_mask is None:
            values[i] = np.sum(va[start:stop])
        else:
            values[i] = np.sum(va[start:stop][seg_mask[start:stop]])

    def backward(g):
        for i, (start, stop) in enumerate(bounds):
            if seg_mask is None:
                a.grad[start:stop] += g[i]
            else:
                a.grad[start:stop][seg_mask[start:stop]] += g[i]

    return Node(graph, values, (a,), backward)


def add_n(nodes: Sequence) -> Node:
    """Sum of same-shape nodes, accumulated left-to-right in given order."""
    if not nodes:
        raise ValueError("add_n: empty node list")
    graph = _graph_of("add_n", *nodes)
    total = np.array(_value(nodes[0]), dtype=np.float64)
    for x in nodes[1:]:
        vx = _value(x)
        _check_elementwise("add_n", total, vx)
        total = total + vx

    def backward(g):
        for x in nodes:
            _accumulate(x, g)

    return Node(graph, total, tuple(nodes), backward)


def mean_n(nodes: Sequence) -> Node:
    """Arithmetic mean of same-shape nodes (fixed order, deterministic)."""
    return mul(add_n(nodes), 1.0 / len(nodes))


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    h: float
    tol: float
    passed: bool


def grad_check(
    build: Callable[[Graph, list[Node]], Node],
    params: Sequence,
    h: float = 1e-5,
    tol: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients of a scalar graph against central differences.

    ``build(graph, leaves)`` must construct and return a scalar Node from
    the given leaves; it is re-invoked for every probe and must be pure.
    The relative error of each coordinate uses the denominator
    max(|analytic|, |numeric|, 1e-8).
    """
    if h <= 0:
        raise ValueError("grad_check: h must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]
    graph = Graph()
    leaves = [graph.leaf(p) for p in base]
    out = build(graph, leaves)
    graph.backward(out)
    analytic = [leaf.grad.copy() for leaf in leaves]

    def evaluate(values) -> float:
        g = Graph()
        return float(build(g, [g.leaf(v) for v in values]).value)

    max_rel = 0.0
    for pi, p in enumerate(base):
        flat = p.reshape(-1)
        grad_flat = analytic[pi].reshape(-1)
        for j in range(flat.size):
            keep = flat[j]
            flat[j] = keep + h
            f_plus = evaluate(base)
            flat[j] = keep - h
            f_minus = evaluate(base)
            flat[j] = keep
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = float(grad_flat[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > max_rel:
                max_rel = rel
    return GradCheckReport(max_rel_error=max_rel, h=h, tol=tol, passed=max_rel <= tol)
