"""Reverse-mode automatic differentiation over dense float64 arrays.

Graphs are built eagerly: every operation computes its value at construction
time and records the structure `grad` needs to walk backwards. Adjoint rules
are themselves expressed through the same operations, so gradients returned
with ``build_graph=True`` are ordinary graphs that can be differentiated
again. That second pass is what the influence guidance term needs: the
gradient of a parameter-gradient dot product with respect to the input.

Tensors are numpy float64 arrays of rank 0, 1 or 2; every completed op is
checked for non-finite values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeMismatch",
    "NumericOverflow",
    "UnsupportedOp",
    "NonScalarRoot",
    "Node",
    "leaf",
    "constant",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "matmul",
    "transpose",
    "reciprocal",
    "tanh",
    "relu",
    "sigmoid",
    "exp",
    "log",
    "softmax",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "slice_axis",
    "pad_axis",
    "concat",
    "sigmoid_cross_entropy",
    "softmax_cross_entropy",
    "squared_error",
    "grad",
    "finite_diff_check",
    "build_graph",
    "ParamEntry",
    "ParamVector",
    "layout_from_shapes",
]


class AutodiffError(Exception):
    """Base class for graph construction and differentiation failures."""


class ShapeMismatch(AutodiffError):
    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = shapes
        super().__init__(f"{op}: incompatible shapes " + " vs ".join(str(s) for s in shapes))


class NumericOverflow(AutodiffError):
    def __init__(self, op: str):
        self.op = op
        super().__init__(f"{op}: produced a non-finite value")


class UnsupportedOp(AutodiffError):
    pass


class NonScalarRoot(AutodiffError):
    pass


class Node:
    """One vertex of the expression graph: an op tag, its inputs, the value."""

    __slots__ = ("op", "inputs", "value", "requires_grad", "meta")

    def __init__(self, op, inputs, value, requires_grad, meta=None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.requires_grad = requires_grad
        self.meta = meta

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.shape})"


def _as_array(values) -> np.ndarray:
    return np.ascontiguousarray(values, dtype=np.float64)


def _check_finite(op: str, value: np.ndarray) -> None:
    # A single sum is far cheaper than isfinite on every element; any inf or
    # nan contaminates the total. Finite values cannot sum to a non-finite
    # total except by overflow, which the precise check below rules out.
    if math.isfinite(float(value.sum())):
        return
    if np.isfinite(value).all():
        return
    raise NumericOverflow(op)


def _make(op: str, inputs: tuple[Node, ...], value: np.ndarray, meta=None) -> Node:
    _check_finite(op, value)
    rg = any(i.requires_grad for i in inputs)
    return Node(op, inputs, value, rg, meta)


def leaf(values, requires_grad: bool = False) -> Node:
    arr = _as_array(values)
    _check_finite("leaf", arr)
    return Node("leaf", (), arr, requires_grad, None)


def constant(values) -> Node:
    return leaf(values, requires_grad=False)


# ---------------------------------------------------------------------------
# operations
#
# Broadcasting for add/sub/mul is deliberately narrow: equal shapes, a scalar
# against anything, or a (rows, n) matrix against an (n,) vector. Everything
# wider is expressed explicitly (see the rank-one expansion in the softmax
# adjoint), which keeps the backward rules small and exact.
# ---------------------------------------------------------------------------


def _bcast_ok(sa: tuple, sb: tuple) -> bool:
    if sa == sb or sa == () or sb == ():
        return True
    if len(sa) == 2 and sb == (sa[1],):
        return True
    if len(sb) == 2 and sa == (sb[1],):
        return True
    return False


def _ew(op: str, a: Node, b: Node, fn) -> Node:
    if not _bcast_ok(a.shape, b.shape):
        raise ShapeMismatch(op, a.shape, b.shape)
    return _make(op, (a, b), fn(a.value, b.value))


def add(a: Node, b: Node) -> Node:
    return _ew("add", a, b, np.add)


def sub(a: Node, b: Node) -> Node:
    return _ew("sub", a, b, np.subtract)


def mul(a: Node, b: Node) -> Node:
    return _ew("elementwise-mul", a, b, np.multiply)


def scalar_mul(a: Node, scale: float) -> Node:
    c = float(scale)
    return _make("scalar-mul", (a,), a.value * c, meta=c)


def matmul(a: Node, b: Node) -> Node:
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch("matmul", a.shape, b.shape)
    return _make("matmul", (a, b), a.value @ b.value)


def transpose(a: Node) -> Node:
    if a.value.ndim != 2:
        raise ShapeMismatch("transpose", a.shape)
    return _make("transpose", (a,), np.ascontiguousarray(a.value.T))


def reciprocal(a: Node) -> Node:
    with np.errstate(divide="ignore"):
        return _make("reciprocal", (a,), 1.0 / a.value)


def tanh(a: Node) -> Node:
    return _make("tanh", (a,), np.tanh(a.value))


def relu(a: Node) -> Node:
    return _make("relu", (a,), np.maximum(a.value, 0.0))


def sigmoid(a: Node) -> Node:
    ex = np.exp(-np.abs(a.value))
    val = np.where(a.value >= 0, 1.0 / (1.0 + ex), ex / (1.0 + ex))
    return _make("sigmoid", (a,), val)


def exp(a: Node) -> Node:
    with np.errstate(over="ignore"):
        return _make("exp", (a,), np.exp(a.value))


def log(a: Node) -> Node:
    with np.errstate(divide="ignore", invalid="ignore"):
        return _make("log", (a,), np.log(a.value))


def softmax(a: Node) -> Node:
    z = a.value
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    return _make("softmax", (a,), e / e.sum(axis=-1, keepdims=True))


def _check_axis(op: str, a: Node, axis) -> None:
    if axis is not None and not (0 <= axis < a.value.ndim):
        raise ShapeMismatch(op, a.shape)


def reduce_sum(a: Node, axis: int | None = None) -> Node:
    _check_axis("sum", a, axis)
    return _make("sum", (a,), np.asarray(a.value.sum(axis=axis)), meta=axis)


def reduce_mean(a: Node, axis: int | None = None) -> Node:
    _check_axis("mean", a, axis)
    return _make("mean", (a,), np.asarray(a.value.mean(axis=axis)), meta=axis)


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != a.value.size:
        raise ShapeMismatch("reshape", a.shape, shape)
    return _make("reshape", (a,), np.ascontiguousarray(a.value.reshape(shape)))


def slice_axis(a: Node, axis: int, start: int, stop: int) -> Node:
    if not (0 <= axis < a.value.ndim) or not (0 <= start < stop <= a.shape[axis]):
        raise ShapeMismatch("slice", a.shape, (axis, start, stop))
    idx = tuple(slice(start, stop) if d == axis else slice(None) for d in range(a.value.ndim))
    return _make("slice", (a,), np.ascontiguousarray(a.value[idx]), meta=(axis, start, stop))


def pad_axis(a: Node, axis: int, start: int, size: int) -> Node:
    """Embed `a` into zeros of extent `size` along `axis`, at offset `start`."""
    if not (0 <= axis < a.value.ndim) or start < 0 or start + a.shape[axis] > size:
        raise ShapeMismatch("pad", a.shape, (axis, start, size))
    out_shape = tuple(size if d == axis else s for d, s in enumerate(a.shape))
    out = np.zeros(out_shape)
    idx = tuple(
        slice(start, start + a.shape[axis]) if d == axis else slice(None)
        for d in range(a.value.ndim)
    )
    out[idx] = a.value
    return _make("pad", (a,), out, meta=(axis, start, size))


def concat(nodes: Sequence[Node], axis: int = 0) -> Node:
    nodes = tuple(nodes)
    if not nodes:
        raise ShapeMismatch("concat", ())
    ndim = nodes[0].value.ndim
    if not (0 <= axis < ndim):
        raise ShapeMismatch("concat", nodes[0].shape)
    for n in nodes[1:]:
        if n.value.ndim != ndim or any(
            n.shape[d] != nodes[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeMismatch("concat", nodes[0].shape, n.shape)
    offsets = []
    off = 0
    for n in nodes:
        offsets.append(off)
        off += n.shape[axis]
    return _make("concat", nodes, np.concatenate([n.value for n in nodes], axis=axis), meta=(axis, tuple(offsets)))


def sigmoid_cross_entropy(logits: Node, targets: Node) -> Node:
    """Elementwise binary cross entropy on logits: softplus(z) - z*y, stable."""
    if logits.shape != targets.shape:
        raise ShapeMismatch("sigmoid-cross-entropy", logits.shape, targets.shape)
    z, y = logits.value, targets.value
    val = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
    return _make("sigmoid-cross-entropy", (logits, targets), val)


def softmax_cross_entropy(logits: Node, onehot: Node) -> Node:
    """Per-row cross entropy of softmax(logits) against one-hot targets."""
    if logits.shape != onehot.shape or logits.value.ndim not in (1, 2):
        raise ShapeMismatch("softmax-cross-entropy", logits.shape, onehot.shape)
    z, y = logits.value, onehot.value
    m = z.max(axis=-1, keepdims=True)
    lse = m.squeeze(-1) + np.log(np.exp(z - m).sum(axis=-1))
    val = np.asarray(lse - (z * y).sum(axis=-1))
    return _make("softmax-cross-entropy", (logits, onehot), val)


def squared_error(a: Node, b: Node) -> Node:
    if a.shape != b.shape:
        raise ShapeMismatch("squared-error", a.shape, b.shape)
    d = a.value - b.value
    return _make("squared-error", (a, b), d * d)


# ---------------------------------------------------------------------------
# adjoint rules
#
# Every rule builds its contributions out of the ops above, so gradient
# graphs stay differentiable. Rules return one lazy builder per input
# (None when that input never receives a gradient).
# ---------------------------------------------------------------------------


def _reduce_to(g: Node, shape: tuple) -> Node:
    if g.shape == shape:
        return g
    if shape == ():
        return reduce_sum(g)
    if len(g.shape) == 2 and shape == (g.shape[1],):
        return reduce_sum(g, axis=0)
    raise ShapeMismatch("reduce-adjoint", g.shape, shape)


def _rows_expand(g: Node, cols: int) -> Node:
    # (rows,) -> (rows, cols), each row constant
    rows = g.shape[0]
    return matmul(reshape(g, (rows, 1)), constant(np.ones((1, cols))))


def _vjp_add(node, g):
    a, b = node.inputs
    return (lambda: _reduce_to(g, a.shape), lambda: _reduce_to(g, b.shape))


def _vjp_sub(node, g):
    a, b = node.inputs
    return (
        lambda: _reduce_to(g, a.shape),
        lambda: scalar_mul(_reduce_to(g, b.shape), -1.0),
    )


def _vjp_mul(node, g):
    a, b = node.inputs
    return (
        lambda: _reduce_to(mul(g, b), a.shape),
        lambda: _reduce_to(mul(g, a), b.shape),
    )


def _vjp_scalar_mul(node, g):
    return (lambda: scalar_mul(g, node.meta),)


def _vjp_matmul(node, g):
    a, b = node.inputs
    return (lambda: matmul(g, transpose(b)), lambda: matmul(transpose(a), g))


def _vjp_transpose(node, g):
    return (lambda: transpose(g),)


def _vjp_reciprocal(node, g):
    return (lambda: scalar_mul(mul(mul(node, node), g), -1.0),)


def _vjp_tanh(node, g):
    return (lambda: mul(g, sub(constant(1.0), mul(node, node))),)


def _vjp_relu(node, g):
    a = node.inputs[0]
    return (lambda: mul(g, constant((a.value > 0).astype(np.float64))),)


def _vjp_sigmoid(node, g):
    return (lambda: mul(g, mul(node, sub(constant(1.0), node))),)


def _vjp_exp(node, g):
    return (lambda: mul(g, node),)


def _vjp_log(node, g):
    a = node.inputs[0]
    return (lambda: mul(g, reciprocal(a)),)


def _vjp_softmax(node, g):
    def build():
        t = mul(g, node)
        if node.value.ndim == 1:
            inner = sub(g, reduce_sum(t))
        else:
            inner = sub(g, _rows_expand(reduce_sum(t, axis=1), node.shape[1]))
        return mul(inner, node)

    return (build,)


def _sum_adjoint(a: Node, g: Node, axis, scale: float | None):
    if axis is None or a.value.ndim == 1:
        out = mul(g, constant(np.ones(a.shape)))
    elif axis == 0:
        out = mul(constant(np.ones(a.shape)), g)
    else:
        out = _rows_expand(g, a.shape[1])
    return out if scale is None else scalar_mul(out, scale)


def _vjp_sum(node, g):
    a = node.inputs[0]
    return (lambda: _sum_adjoint(a, g, node.meta, None),)


def _vjp_mean(node, g):
    a = node.inputs[0]
    k = a.value.size if node.meta is None else a.shape[node.meta]
    return (lambda: _sum_adjoint(a, g, node.meta, 1.0 / k),)


def _vjp_reshape(node, g):
    a = node.inputs[0]
    return (lambda: reshape(g, a.shape),)


def _vjp_slice(node, g):
    a = node.inputs[0]
    axis, start, _stop = node.meta
    return (lambda: pad_axis(g, axis, start, a.shape[axis]),)


def _vjp_pad(node, g):
    a = node.inputs[0]
    axis, start, _size = node.meta
    return (lambda: slice_axis(g, axis, start, start + a.shape[axis]),)


def _vjp_concat(node, g):
    axis, offsets = node.meta

    def builder(i):
        n = node.inputs[i]
        return lambda: slice_axis(g, axis, offsets[i], offsets[i] + n.shape[axis])

    return tuple(builder(i) for i in range(len(node.inputs)))


def _vjp_sigmoid_ce(node, g):
    z, y = node.inputs
    return (
        lambda: mul(sub(sigmoid(z), y), g),
        lambda: mul(scalar_mul(z, -1.0), g),
    )


def _vjp_softmax_ce(node, g):
    z, y = node.inputs

    def expand(gn):
        return gn if z.value.ndim == 1 else _rows_expand(gn, z.shape[1])

    return (
        lambda: mul(sub(softmax(z), y), expand(g)),
        lambda: mul(scalar_mul(z, -1.0), expand(g)),
    )


def _vjp_squared_error(node, g):
    a, b = node.inputs
    return (
        lambda: mul(scalar_mul(sub(a, b), 2.0), g),
        lambda: mul(scalar_mul(sub(a, b), -2.0), g),
    )


_VJP: dict[str, Callable] = {
    "add": _vjp_add,
    "sub": _vjp_sub,
    "elementwise-mul": _vjp_mul,
    "scalar-mul": _vjp_scalar_mul,
    "matmul": _vjp_matmul,
    "transpose": _vjp_transpose,
    "reciprocal": _vjp_reciprocal,
    "tanh": _vjp_tanh,
    "relu": _vjp_relu,
    "sigmoid": _vjp_sigmoid,
    "exp": _vjp_exp,
    "log": _vjp_log,
    "softmax": _vjp_softmax,
    "sum": _vjp_sum,
    "mean": _vjp_mean,
    "reshape": _vjp_reshape,
    "slice": _vjp_slice,
    "pad": _vjp_pad,
    "concat": _vjp_concat,
    "sigmoid-cross-entropy": _vjp_sigmoid_ce,
    "softmax-cross-entropy": _vjp_softmax_ce,
    "squared-error": _vjp_squared_error,
}


def grad(root: Node, wrt: Sequence[Node], build_graph: bool = False):
    """Gradients of a scalar root with respect to each node in `wrt`.

    Returns arrays by default; with ``build_graph=True`` returns graph nodes
    that can be differentiated again. Nodes unreachable from the root get
    zero gradients. Each graph node is visited at most once (reverse
    topological order), and only the subgraph that can reach a target is
    walked at all.
    """
    if root.shape != ():
        raise NonScalarRoot(f"grad root must be scalar, got shape {root.shape}")
    wrt = list(wrt)
    for w in wrt:
        if not w.requires_grad:
            raise AutodiffError("grad target does not have requires_grad set")
    targets = {id(w) for w in wrt}

    # Postorder walk marking nodes from which some target is reachable.
    needed: dict[int, bool] = {}
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            need = id(node) in targets or any(needed.get(id(i), False) for i in node.inputs)
            needed[id(node)] = need
            if need:
                order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for inp in node.inputs:
            if id(inp) not in seen:
                stack.append((inp, False))

    adjoint: dict[int, Node] = {}
    if needed.get(id(root), False):
        adjoint[id(root)] = constant(1.0)
        for node in reversed(order):
            g = adjoint.get(id(node))
            if g is None or not node.inputs:
                continue
            rule = _VJP.get(node.op)
            if rule is None:
                raise UnsupportedOp(f"no adjoint rule for op '{node.op}'")
            builders = rule(node, g)
            for inp, build in zip(node.inputs, builders):
                if build is None or not needed.get(id(inp), False):
                    continue
                contrib = build()
                prev = adjoint.get(id(inp))
                adjoint[id(inp)] = contrib if prev is None else add(prev, contrib)

    results = []
    for w in wrt:
        gn = adjoint.get(id(w))
        if gn is None:
            gn = constant(np.zeros(w.shape))
        results.append(gn)
    return results if build_graph else [r.value.copy() for r in results]


def finite_diff_check(f: Callable[[Node], Node], x, step: float = 1e-5) -> float:
    """Max relative disagreement between reverse-mode and central differences.

    `f` maps a graph node to a scalar node. The relative error per coordinate
    is |fd - ad| / (|fd| + |ad| + 1e-12).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    x = _as_array(x)
    lf = leaf(x, requires_grad=True)
    g_ad = grad(f(lf), [lf])[0].ravel()

    flat = x.ravel()
    g_fd = np.zeros_like(flat)
    for i in range(flat.size):
        vals = []
        for sign in (1.0, -1.0):
            probe = flat.copy()
            probe[i] += sign * step
            try:
                out = float(f(constant(probe.reshape(x.shape))).value)
            except NumericOverflow:
                out = math.nan
            if not math.isfinite(out):
                raise AutodiffError(f"finite_diff_check: non-finite value at coordinate {i}")
            vals.append(out)
        g_fd[i] = (vals[0] - vals[1]) / (2.0 * step)

    rel = np.abs(g_fd - g_ad) / (np.abs(g_fd) + np.abs(g_ad) + 1e-12)
    return float(rel.max()) if rel.size else 0.0


# ---------------------------------------------------------------------------
# op-sequence programs
# ---------------------------------------------------------------------------

_PROGRAM_OPS: dict[str, Callable] = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "scalar-mul": scalar_mul,
    "elementwise-mul": mul,
    "tanh": tanh,
    "relu": relu,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softmax": softmax,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "slice": slice_axis,
    "reshape": reshape,
    "concat": lambda *nodes, axis=0: concat(nodes, axis=axis),
    "transpose": transpose,
    "reciprocal": reciprocal,
    "softmax-cross-entropy": softmax_cross_entropy,
    "sigmoid-cross-entropy": sigmoid_cross_entropy,
    "squared-error": squared_error,
}


def build_graph(inputs: Sequence, program: Sequence) -> Node:
    """Evaluate an op-sequence program over input tensors; return the root.

    Each instruction is ``(op_tag, *refs)`` optionally followed by a dict of
    keyword parameters (e.g. ``("scalar-mul", 0, {"scale": 2.0})``). Integer
    refs select inputs first (0..len(inputs)-1), then earlier instruction
    results in order.
    """
    if not program:
        raise UnsupportedOp("empty program")
    registry: list[Node] = [leaf(v, requires_grad=True) for v in inputs]
    for instr in program:
        op = instr[0]
        rest = list(instr[1:])
        params = rest.pop() if rest and isinstance(rest[-1], dict) else {}
        fn = _PROGRAM_OPS.get(op)
        if fn is None:
            raise UnsupportedOp(f"unknown op tag '{op}'")
        try:
            args = [registry[r] for r in rest]
        except IndexError:
            raise UnsupportedOp(f"{op}: reference outside program range") from None
        registry.append(fn(*args, **params))
    return registry[-1]


# ---------------------------------------------------------------------------
# flattened parameter vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ParamEntry:
    name: str
    shape: tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


def layout_from_shapes(named_shapes: Sequence[tuple[str, tuple[int, ...]]]) -> tuple[ParamEntry, ...]:
    entries = []
    offset = 0
    for name, shape in named_shapes:
        entry = ParamEntry(name, tuple(int(s) for s in shape), offset)
        entries.append(entry)
        offset += entry.size
    return tuple(entries)


@dataclass(frozen=True)
class ParamVector:
    """All parameters of one architecture as a single flat float64 vector."""

    values: np.ndarray
    layout: tuple[ParamEntry, ...]
    arch_id: str

    def __post_init__(self):
        vals = _as_array(self.values)
        if vals.ndim != 1:
            raise ValueError("ParamVector values must be one-dimensional")
        offset = 0
        for entry in self.layout:
            if entry.offset != offset:
                raise ValueError(f"layout entry {entry.name} is not contiguous")
            offset += entry.size
        if offset != vals.size:
            raise ValueError(f"layout covers {offset} values, vector has {vals.size}")
        vals = vals.copy()
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def size(self) -> int:
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        for entry in self.layout:
            if entry.name == name:
                return self.values[entry.offset : entry.offset + entry.size].reshape(entry.shape)
        raise KeyError(name)

    def to_dict(self) -> dict[str, np.ndarray]:
        return {e.name: self.view(e.name) for e in self.layout}

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout, self.arch_id)
