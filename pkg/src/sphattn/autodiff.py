"""Reverse-mode automatic differentiation over numpy arrays.

A small eager autograd engine: each operation computes its value
immediately and records its parents together with a vector-Jacobian
closure. ``grad`` walks the recorded graph in reverse creation order and
accumulates cotangents. The closures emit taped operations themselves,
so gradient expressions stay differentiable; a force prediction obtained
by one reverse pass can therefore enter a loss whose parameter gradient
is computed by a second reverse pass over the extended graph.

Everything is double precision. One evaluation builds one implicit tape;
tapes must not be shared across threads, but independent evaluations may
run concurrently.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

_COUNTER = itertools.count()


class MissingDependencyError(ValueError):
    """Raised when a gradient target is not part of the evaluated graph."""


class Node:
    """One value in the computation graph.

    ``value`` is always a float64 ndarray (possibly 0-d). Leaves have no
    parents; interior nodes carry a VJP closure mapping the incoming
    cotangent node to one cotangent node per parent (None for parents
    that need no gradient).
    """

    __slots__ = ("value", "op", "parents", "vjp", "tid", "__weakref__")

    def __init__(self, value, op="leaf", parents=(), vjp=None):
        self.value = np.asarray(value)
        self.op = op
        self.parents = parents
        self.vjp = vjp
        self.tid = next(_COUNTER)

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node({self.op}, shape={self.value.shape}, tid={self.tid})"

    # arithmetic sugar; scalars and arrays are lifted to constants
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, p):
        return pow_const(self, p)

    def __matmul__(self, other):
        return matmul(self, other)


def leaf(value) -> Node:
    """Wrap an array as a differentiable input."""
    return Node(np.asarray(value, dtype=float))


def constant(value) -> Node:
    """Wrap an array as a non-differentiable constant."""
    return Node(np.asarray(value, dtype=float), op="const")


def as_node(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def detach(x: Node) -> Node:
    """Copy of x's value with no graph history."""
    return constant(x.value)


def _sum_to(g: Node, shape: tuple[int, ...]) -> Node:
    # Reduce a broadcast cotangent back to the parent's shape.
    if g.value.shape == shape:
        return g
    extra = g.value.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.value.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


def add(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape

    def vjp(ct):
        return _sum_to(ct, sa), _sum_to(ct, sb)

    return Node(a.value + b.value, "add", (a, b), vjp)


def sub(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape

    def vjp(ct):
        return _sum_to(ct, sa), _sum_to(neg(ct), sb)

    return Node(a.value - b.value, "sub", (a, b), vjp)


def neg(a) -> Node:
    a = as_node(a)

    def vjp(ct):
        return (neg(ct),)

    return Node(-a.value, "neg", (a,), vjp)


def mul(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape

    def vjp(ct):
        return _sum_to(mul(ct, b), sa), _sum_to(mul(ct, a), sb)

    return Node(a.value * b.value, "mul", (a, b), vjp)


def div(a, b) -> Node:
    a, b = as_node(a), as_node(b)
    sa, sb = a.value.shape, b.value.shape
    out = Node(a.value / b.value, "div", (a, b), None)

    def vjp(ct):
        da = div(ct, b)
        db = neg(div(mul(ct, out), b))
        return _sum_to(da, sa), _sum_to(db, sb)

    out.vjp = vjp
    return out


def pow_const(a, p: float) -> Node:
    a = as_node(a)
    p = float(p)

    def vjp(ct):
        return (mul(ct, mul(constant(p), pow_const(a, p - 1.0))),)

    return Node(a.value**p, "pow", (a,), vjp)


def exp(a) -> Node:
    a = as_node(a)
    out = Node(np.exp(a.value), "exp", (a,), None)
    out.vjp = lambda ct: (mul(ct, out),)
    return out


def log(a) -> Node:
    a = as_node(a)

    def vjp(ct):
        return (div(ct, a),)

    return Node(np.log(a.value), "log", (a,), vjp)


def sqrt(a) -> Node:
    a = as_node(a)
    out = Node(np.sqrt(a.value), "sqrt", (a,), None)
    out.vjp = lambda ct: (div(ct, mul(constant(2.0), out)),)
    return out


def sin(a) -> Node:
    a = as_node(a)

    def vjp(ct):
        return (mul(ct, cos(a)),)

    return Node(np.sin(a.value), "sin", (a,), vjp)


def cos(a) -> Node:
    a = as_node(a)

    def vjp(ct):
        return (neg(mul(ct, sin(a))),)

    return Node(np.cos(a.value), "cos", (a,), vjp)


def tanh(a) -> Node:
    a = as_node(a)
    out = Node(np.tanh(a.value), "tanh", (a,), None)
    out.vjp = lambda ct: (mul(ct, sub(constant(1.0), mul(out, out))),)
    return out


def sigmoid(a) -> Node:
    """Logistic function, evaluated via exp(-|z|) to avoid overflow."""
    a = as_node(a)
    z = a.value
    ez = np.exp(-np.abs(z))
    val = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    out = Node(np.asarray(val), "sigmoid", (a,), None)
    out.vjp = lambda ct: (mul(ct, mul(out, sub(constant(1.0), out))),)
    return out


def sum_(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    shape = a.value.shape

    def vjp(ct):
        if axis is None:
            g = reshape(ct, (1,) * len(shape)) if shape else ct
            return (broadcast_to(g, shape),)
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = ct
        if not keepdims:
            kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
            g = reshape(g, kshape)
        return (broadcast_to(g, shape),)

    return Node(np.sum(a.value, axis=axis, keepdims=keepdims), "sum", (a,), vjp)


def mean(a, axis=None, keepdims=False) -> Node:
    a = as_node(a)
    n = a.value.size if axis is None else np.prod(
        [a.value.shape[ax] for ax in ((axis,) if isinstance(axis, int) else axis)]
    )
    return div(sum_(a, axis=axis, keepdims=keepdims), constant(float(n)))


def sum_exact(a) -> Node:
    """Correctly rounded full reduction (math.fsum); order-independent."""
    a = as_node(a)
    shape = a.value.shape

    def vjp(ct):
        g = reshape(ct, (1,) * len(shape)) if shape else ct
        return (broadcast_to(g, shape),)

    return Node(np.asarray(math.fsum(a.value.ravel().tolist())), "fsum", (a,), vjp)


def segment_sum(a, segment_ids, num_segments: int, exact: bool = False) -> Node:
    """Sum rows of ``a`` into ``num_segments`` buckets along axis 0.

    Accumulation follows row order (np.add.at), which is deterministic.
    With ``exact=True`` (1-d input only) each bucket uses math.fsum, so
    the result does not depend on row order at all.
    """
    a = as_node(a)
    ids = np.asarray(segment_ids, dtype=int)
    if exact:
        if a.value.ndim != 1:
            raise ValueError("exact segment_sum supports 1-d input only")
        val = np.array(
            [math.fsum(a.value[ids == s].tolist()) for s in range(num_segments)]
        )
    else:
        val = np.zeros((num_segments,) + a.value.shape[1:])
        np.add.at(val, ids, a.value)

    def vjp(ct):
        return (take(ct, (ids,)),)

    return Node(val, "segment_sum", (a,), vjp)


def matmul(a, b) -> Node:
    """Matrix product with numpy batch broadcasting; operands must be >= 2-d."""
    a, b = as_node(a), as_node(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must have ndim >= 2")
    sa, sb = a.value.shape, b.value.shape

    def vjp(ct):
        da = matmul(ct, _swap_last(b))
        db = matmul(_swap_last(a), ct)
        return _sum_to(da, sa), _sum_to(db, sb)

    return Node(a.value @ b.value, "matmul", (a, b), vjp)


def _swap_last(a: Node) -> Node:
    axes = tuple(range(a.value.ndim - 2)) + (a.value.ndim - 1, a.value.ndim - 2)
    return transpose(a, axes)


def transpose(a, axes=None) -> Node:
    a = as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inv = tuple(np.argsort(axes))

    def vjp(ct):
        return (transpose(ct, inv),)

    return Node(np.transpose(a.value, axes), "transpose", (a,), vjp)


def reshape(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape

    def vjp(ct):
        return (reshape(ct, old),)

    return Node(np.reshape(a.value, shape), "reshape", (a,), vjp)


def broadcast_to(a, shape) -> Node:
    a = as_node(a)
    old = a.value.shape

    def vjp(ct):
        return (_sum_to(ct, old),)

    return Node(np.broadcast_to(a.value, shape).copy(), "broadcast", (a,), vjp)


def concat(nodes, axis=0) -> Node:
    nodes = [as_node(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def vjp(ct):
        outs = []
        for k in range(len(nodes)):
            key = [slice(None)] * ct.value.ndim
            key[axis] = slice(int(offsets[k]), int(offsets[k + 1]))
            outs.append(take(ct, tuple(key)))
        return tuple(outs)

    return Node(np.concatenate([n.value for n in nodes], axis=axis), "concat", tuple(nodes), vjp)


def take(a, key) -> Node:
    """Basic or integer-array indexing; the gradient scatter-adds into zeros."""
    a = as_node(a)
    shape = a.value.shape

    def vjp(ct):
        return (scatter_add(shape, key, ct),)

    val = a.value[key]
    if np.isscalar(val) or val.ndim == 0:
        val = np.asarray(val, dtype=float)
    return Node(val, "take", (a,), vjp)


def scatter_add(shape, key, values) -> Node:
    """Zeros of ``shape`` with ``values`` added at ``key`` (duplicates accumulate)."""
    values = as_node(values)
    out = np.zeros(shape)
    np.add.at(out, key, values.value)

    def vjp(ct):
        return (take(ct, key),)

    return Node(out, "scatter_add", (values,), vjp)


def where_mask(mask, a, b) -> Node:
    """Elementwise select with a fixed boolean mask (not differentiated)."""
    a, b = as_node(a), as_node(b)
    mask = np.asarray(mask, dtype=bool)
    sa, sb = a.value.shape, b.value.shape
    zero = constant(np.zeros(()))

    def vjp(ct):
        return (
            _sum_to(where_mask(mask, ct, zero), sa),
            _sum_to(where_mask(mask, zero, ct), sb),
        )

    return Node(np.where(mask, a.value, b.value), "where", (a, b), vjp)


def norm(a, axis=-1, keepdims=False) -> Node:
    """Euclidean norm along one axis with the zero-vector subgradient set to 0.

    Implemented as a primitive rather than sqrt(sum(x^2)) so the gradient
    at the zero vector is exactly zero instead of NaN.
    """
    a = as_node(a)
    val = np.sqrt(np.sum(a.value * a.value, axis=axis, keepdims=keepdims))
    out = Node(np.asarray(val), "norm", (a,), None)

    def vjp(ct):
        nkeep = out if keepdims else _restore_axis(out, a.value.ndim, axis)
        ctk = ct if keepdims else _restore_axis(ct, a.value.ndim, axis)
        mask = np.broadcast_to(nkeep.value > 0, a.value.shape)
        safe = where_mask(nkeep.value > 0, nkeep, constant(np.ones(())))
        return (where_mask(mask, div(mul(ctk, a), safe), constant(np.zeros(()))),)

    out.vjp = vjp
    return out


def _restore_axis(x: Node, ndim: int, axis: int) -> Node:
    axis = axis % ndim
    shape = list(x.value.shape)
    shape.insert(axis, 1)
    return reshape(x, tuple(shape))


@dataclass(frozen=True)
class TapeEntry:
    op: str
    node_id: int
    parent_ids: tuple[int, ...]
    shape: tuple[int, ...]


class Tape:
    """Ordered record of the primitive operations reachable from an output.

    Entries appear in creation order, which is a valid topological order:
    every node's parents were created (and therefore recorded) before it.
    """

    def __init__(self, entries: list[TapeEntry]):
        self.entries = entries

    @classmethod
    def from_output(cls, output: Node) -> "Tape":
        nodes = _reachable(output)
        return cls(
            [
                TapeEntry(n.op, n.tid, tuple(p.tid for p in n.parents), n.value.shape)
                for n in nodes
            ]
        )

    def validate(self) -> None:
        seen = set()
        last = -1
        for e in self.entries:
            if e.node_id <= last:
                raise ValueError("tape entries out of creation order")
            for p in e.parent_ids:
                if p not in seen:
                    raise ValueError(f"node {e.node_id} consumes unrecorded node {p}")
            seen.add(e.node_id)
            last = e.node_id

    def __len__(self):
        return len(self.entries)


def _reachable(output: Node) -> list[Node]:
    # Iterative DFS; returns nodes sorted by creation id (ascending).
    seen = {}
    stack = [output]
    while stack:
        n = stack.pop()
        if n.tid in seen:
            continue
        seen[n.tid] = n
        stack.extend(n.parents)
    return [seen[t] for t in sorted(seen)]


def grad(output: Node, wrt, allow_unused: bool = False) -> list[Node]:
    """Gradients of a scalar output with respect to each node in ``wrt``.

    The returned gradients are themselves graph nodes, so they can be
    differentiated again. Targets that the output does not depend on
    raise MissingDependencyError unless ``allow_unused`` is set, in which
    case they get zeros.
    """
    if output.value.size != 1:
        raise ValueError("grad requires a scalar output")
    wrt = list(wrt)
    nodes = _reachable(output)
    ids = {n.tid for n in nodes}
    for w in wrt:
        if w.tid not in ids and not allow_unused:
            raise MissingDependencyError(
                f"node {w.tid} ({w.op}) is not part of the evaluated graph"
            )

    # Only walk nodes that lie on a path from some target to the output.
    want = {w.tid for w in wrt}
    relevant = set()
    for n in nodes:  # ascending creation order: parents first
        if n.tid in want or any(p.tid in relevant for p in n.parents):
            relevant.add(n.tid)

    cot: dict[int, Node] = {output.tid: constant(np.ones(output.value.shape))}
    for n in reversed(nodes):
        ct = cot.get(n.tid)
        if ct is None or n.vjp is None or n.tid not in relevant:
            continue
        for p, g in zip(n.parents, n.vjp(ct)):
            if g is None or p.tid not in relevant:
                continue
            have = cot.get(p.tid)
            cot[p.tid] = g if have is None else add(have, g)

    out = []
    for w in wrt:
        g = cot.get(w.tid)
        out.append(g if g is not None else constant(np.zeros(w.value.shape)))
    return out


def release(*roots) -> None:
    """Snap the edges of a finished graph so refcounting frees it now.

    VJP closures reference their own output node, and those cycles fall
    only to the cyclic collector, whose thresholds count objects rather
    than the hundreds of megabytes of numpy buffers a large evaluation
    pins. A caller that has extracted plain values and will never
    differentiate the graph again should release its roots; the graph
    below them becomes unusable for grad afterwards.
    """
    stack = [r for r in roots if isinstance(r, Node)]
    seen: set[int] = set()
    while stack:
        n = stack.pop()
        if n.tid in seen:
            continue
        seen.add(n.tid)
        stack.extend(n.parents)
        n.parents = ()
        n.vjp = None
