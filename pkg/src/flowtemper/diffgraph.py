"""Reverse-mode automatic differentiation of scalar objectives.

A dynamic tape over float64 numpy arrays: every operation creates a `Node`
holding its value and a vector-Jacobian-product closure. `backward` walks the
nodes in reverse creation order (creation order is a topological order, since
inputs always exist before their consumers).

Objectives must be composed of the primitives registered here; anything else
(e.g. an unregistered numpy ufunc applied to a Node) raises
`UnregisteredPrimitive` naming the offender. Non-finite intermediate values
raise `NonFiniteValue` with the producing op and shape.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np


class DiffgraphError(Exception):
    pass


class UnregisteredPrimitive(DiffgraphError):
    pass


class NonFiniteValue(DiffgraphError):
    pass


_ids = itertools.count()

# Ops that can turn finite inputs non-finite; only their outputs (plus leaf
# inputs and final gradients) need probing. Linear/stable ops cannot.
_PROBED_OPS = frozenset(
    {"exp", "log", "sqrt", "div", "power", "softmax", "input", "params", "gradient"}
)


def _probe_finite(value, op):
    # One-pass probe: NaN/Inf propagate through the sum. Cheaper than
    # isfinite().all() and sufficient for magnitudes far below 1e308.
    s = value.sum() if isinstance(value, np.ndarray) else value
    if not math.isfinite(s):
        shape = getattr(value, "shape", ())
        raise NonFiniteValue(f"non-finite value produced by op '{op}' (shape {shape})")


class Node:
    """One tape entry: a float64 array value plus its backward closure."""

    __slots__ = ("value", "parents", "vjp", "op", "nid", "grad", "_own_grad")

    def __init__(self, value, parents=(), vjp=None, op="input"):
        if isinstance(value, np.ndarray):
            if value.dtype != np.float64:
                value = value.astype(np.float64)
        else:
            value = np.float64(value)
        if op in _PROBED_OPS:
            _probe_finite(value, op)
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.nid = next(_ids)
        self.grad = None
        self._own_grad = False

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    # -- operator sugar ------------------------------------------------
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

    def __pow__(self, c):
        return power(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    # numpy interop: route registered ufuncs to tape ops, refuse the rest.
    def __array_ufunc__(self, ufunc, method, *inputs, **kwargs):
        if method != "__call__" or kwargs:
            raise UnregisteredPrimitive(
                f"primitive not registered with tape: {ufunc.__name__}.{method}"
            )
        handler = _UFUNC_MAP.get(ufunc)
        if handler is None:
            raise UnregisteredPrimitive(
                f"primitive not registered with tape: {ufunc.__name__}"
            )
        return handler(*inputs)


def is_node(x) -> bool:
    return isinstance(x, Node)


def raw(x):
    """Underlying numpy value of a Node, or the input unchanged."""
    return x.value if isinstance(x, Node) else x


def _as_value(x):
    v = raw(x)
    return v if isinstance(v, np.ndarray) else np.float64(v)


def _accum(node: Node, g):
    if node.grad is None:
        node.grad = g
        node._own_grad = False
    else:
        # Never mutate a possibly shared buffer unless we own it.
        if node._own_grad:
            node.grad += g
        else:
            node.grad = node.grad + g
            node._own_grad = True


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- binary arithmetic ---------------------------------------------------


def add(a, b):
    if not (is_node(a) or is_node(b)):
        return np.add(a, b)
    av, bv = _as_value(a), _as_value(b)
    out_parents = tuple(x for x in (a, b) if is_node(x))

    def vjp(g):
        if is_node(a):
            _accum(a, _unbroadcast(g, av.shape))
        if is_node(b):
            _accum(b, _unbroadcast(g, bv.shape))

    return Node(av + bv, out_parents, vjp, "add")


def sub(a, b):
    if not (is_node(a) or is_node(b)):
        return np.subtract(a, b)
    av, bv = _as_value(a), _as_value(b)
    out_parents = tuple(x for x in (a, b) if is_node(x))

    def vjp(g):
        if is_node(a):
            _accum(a, _unbroadcast(g, av.shape))
        if is_node(b):
            _accum(b, _unbroadcast(-g, bv.shape))

    return Node(av - bv, out_parents, vjp, "sub")


def mul(a, b):
    if not (is_node(a) or is_node(b)):
        return np.multiply(a, b)
    av, bv = _as_value(a), _as_value(b)
    out_parents = tuple(x for x in (a, b) if is_node(x))

    def vjp(g):
        if is_node(a):
            _accum(a, _unbroadcast(g * bv, av.shape))
        if is_node(b):
            _accum(b, _unbroadcast(g * av, bv.shape))

    return Node(av * bv, out_parents, vjp, "mul")


def div(a, b):
    if not (is_node(a) or is_node(b)):
        return np.divide(a, b)
    av, bv = _as_value(a), _as_value(b)
    out_parents = tuple(x for x in (a, b) if is_node(x))
    inv = 1.0 / bv

    def vjp(g):
        if is_node(a):
            _accum(a, _unbroadcast(g * inv, av.shape))
        if is_node(b):
            _accum(b, _unbroadcast(-g * av * inv * inv, bv.shape))

    return Node(av * inv, out_parents, vjp, "div")


def neg(a):
    if not is_node(a):
        return np.negative(a)

    def vjp(g):
        _accum(a, -g)

    return Node(-a.value, (a,), vjp, "neg")


def power(a, c):
    """a ** c for a constant exponent c."""
    if is_node(c):
        raise UnregisteredPrimitive("primitive not registered with tape: power with Node exponent")
    if not is_node(a):
        return np.power(a, c)
    av = a.value
    out = av**c

    def vjp(g):
        _accum(a, g * (c * av ** (c - 1)))

    return Node(out, (a,), vjp, "power")


# -- elementwise ----------------------------------------------------------


def exp(a):
    if not is_node(a):
        return np.exp(a)
    out = np.exp(a.value)

    def vjp(g):
        _accum(a, g * out)

    return Node(out, (a,), vjp, "exp")


def log(a):
    if not is_node(a):
        return np.log(a)
    av = a.value

    def vjp(g):
        _accum(a, g / av)

    return Node(np.log(av), (a,), vjp, "log")


def sqrt(a):
    if not is_node(a):
        return np.sqrt(a)
    out = np.sqrt(a.value)

    def vjp(g):
        _accum(a, g * (0.5 / out))

    return Node(out, (a,), vjp, "sqrt")


def tanh(a):
    if not is_node(a):
        return np.tanh(a)
    out = np.tanh(a.value)

    def vjp(g):
        _accum(a, g * (1.0 - out * out))

    return Node(out, (a,), vjp, "tanh")


def _sigmoid_value(x):
    # overflow-free via the tanh identity; much faster than branch masking
    return 0.5 * np.tanh(0.5 * x) + 0.5


def sigmoid(a):
    if not is_node(a):
        return _sigmoid_value(np.asarray(a, dtype=float))
    out = _sigmoid_value(np.asarray(a.value, dtype=float))

    def vjp(g):
        _accum(a, g * out * (1.0 - out))

    return Node(out, (a,), vjp, "sigmoid")


def silu(a):
    """Sigmoid-weighted linear unit x * sigmoid(x)."""
    if not is_node(a):
        x = np.asarray(a, dtype=float)
        return x * _sigmoid_value(x)
    x = a.value
    s = _sigmoid_value(np.asarray(x, dtype=float))
    out = x * s

    def vjp(g):
        _accum(a, g * (s * (1.0 + x * (1.0 - s))))

    return Node(out, (a,), vjp, "silu")


def _softplus_value(x):
    # overflow-free and much faster than logaddexp
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus(a):
    if not is_node(a):
        return _softplus_value(np.asarray(a, dtype=float))
    av = a.value
    out = _softplus_value(av)

    def vjp(g):
        _accum(a, g * _sigmoid_value(np.asarray(av, dtype=float)))

    return Node(out, (a,), vjp, "softplus")


def softmax(a, axis=-1):
    if not is_node(a):
        av = np.asarray(a, dtype=float)
        e = np.exp(av - np.max(av, axis=axis, keepdims=True))
        return e / e.sum(axis=axis, keepdims=True)
    av = a.value
    e = np.exp(av - np.max(av, axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        _accum(a, out * (g - dot))

    return Node(out, (a,), vjp, "softmax")


# -- reductions ------------------------------------------------------------


def sum_(a, axis=None, keepdims=False):
    if not is_node(a):
        return np.sum(a, axis=axis, keepdims=keepdims)
    av = a.value

    def vjp(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, av.shape).copy())
        else:
            ge = g if keepdims else np.expand_dims(g, axis)
            _accum(a, np.broadcast_to(ge, av.shape).copy())

    return Node(np.sum(av, axis=axis, keepdims=keepdims), (a,), vjp, "sum")


def mean(a, axis=None, keepdims=False):
    if not is_node(a):
        return np.mean(a, axis=axis, keepdims=keepdims)
    av = a.value
    if axis is None:
        count = av.size
    else:
        count = av.shape[axis]
    return sum_(a, axis=axis, keepdims=keepdims) / float(count)


def logsumexp(a, axis=-1):
    """Shift-stabilized log-sum-exp; the shift is treated as a constant."""
    shift = np.max(_as_value(a), axis=axis, keepdims=True)
    return log(sum_(exp(a - shift), axis=axis)) + np.squeeze(shift, axis=axis)


# -- linear algebra / structure -------------------------------------------


def matmul(a, b):
    if not (is_node(a) or is_node(b)):
        return np.matmul(a, b)
    av, bv = _as_value(a), _as_value(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise UnregisteredPrimitive("primitive not registered with tape: matmul on non-2d operands")
    out_parents = tuple(x for x in (a, b) if is_node(x))

    def vjp(g):
        if is_node(a):
            _accum(a, g @ bv.T)
        if is_node(b):
            _accum(b, av.T @ g)

    return Node(av @ bv, out_parents, vjp, "matmul")


def gather_last(a, idx):
    """Select one entry along the last axis per leading position."""
    idx = np.asarray(raw(idx))
    if not is_node(a):
        return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]
    av = a.value
    out = np.take_along_axis(av, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        full = np.zeros_like(av)
        np.put_along_axis(full, idx[..., None], g[..., None], axis=-1)
        _accum(a, full)

    return Node(out, (a,), vjp, "gather")


def take_cols(a, idx):
    """Column gather on a 2-d array; `idx` must not repeat columns."""
    idx = np.asarray(raw(idx), dtype=np.intp)
    if not is_node(a):
        return a[:, idx]
    av = a.value

    def vjp(g):
        full = np.zeros_like(av)
        full[:, idx] = g
        _accum(a, full)

    return Node(av[:, idx], (a,), vjp, "take_cols")


def concat_cols(parts):
    """Concatenate 2-d blocks along axis 1."""
    if not any(is_node(p) for p in parts):
        return np.concatenate(parts, axis=1)
    values = [_as_value(p) for p in parts]
    widths = [v.shape[1] for v in values]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    node_parents = tuple(p for p in parts if is_node(p))

    def vjp(g):
        for p, off, w in zip(parts, offsets, widths):
            if is_node(p):
                _accum(p, g[:, off : off + w])

    return Node(np.concatenate(values, axis=1), node_parents, vjp, "concat_cols")


def concat_last(parts):
    """Concatenate blocks along the last axis (any rank)."""
    if not any(is_node(p) for p in parts):
        return np.concatenate(parts, axis=-1)
    values = [_as_value(p) for p in parts]
    widths = [v.shape[-1] for v in values]
    offsets = np.concatenate([[0], np.cumsum(widths)])
    node_parents = tuple(p for p in parts if is_node(p))

    def vjp(g):
        for p, off, w in zip(parts, offsets, widths):
            if is_node(p):
                _accum(p, g[..., off : off + w])

    return Node(np.concatenate(values, axis=-1), node_parents, vjp, "concat_last")


def reshape(a, shape):
    if not is_node(a):
        return np.reshape(a, shape)
    av = a.value

    def vjp(g):
        _accum(a, g.reshape(av.shape))

    return Node(av.reshape(shape), (a,), vjp, "reshape")


def cumsum_last(a):
    if not is_node(a):
        return np.cumsum(a, axis=-1)
    av = a.value

    def vjp(g):
        _accum(a, np.flip(np.cumsum(np.flip(g, -1), -1), -1))

    return Node(np.cumsum(av, axis=-1), (a,), vjp, "cumsum")


def where(cond, a, b):
    """Select by a constant boolean mask; no gradient flows to the mask."""
    cond = np.asarray(raw(cond), dtype=bool)
    if not (is_node(a) or is_node(b)):
        return np.where(cond, a, b)
    av, bv = _as_value(a), _as_value(b)
    out_parents = tuple(x for x in (a, b) if is_node(x))

    def vjp(g):
        if is_node(a):
            _accum(a, _unbroadcast(np.where(cond, g, 0.0), av.shape))
        if is_node(b):
            _accum(b, _unbroadcast(np.where(cond, 0.0, g), bv.shape))

    return Node(np.where(cond, av, bv), out_parents, vjp, "where")


def getitem(a, key):
    if not is_node(a):
        return a[key]
    av = a.value
    out = av[key]

    def vjp(g):
        full = np.zeros_like(av)
        full[key] = g
        _accum(a, full)

    return Node(out, (a,), vjp, "getitem")


def segment(a, offset, size, shape=None):
    """Contiguous slice of a flat leaf vector, optionally reshaped.

    The backward pass adds into the leaf's gradient buffer in place, which
    keeps carving many parameter tensors out of one flat vector cheap.
    """
    if not is_node(a):
        v = a[offset : offset + size]
        return v.reshape(shape) if shape is not None else v
    av = a.value
    out = av[offset : offset + size]
    if shape is not None:
        out = out.reshape(shape)

    def vjp(g):
        if a.grad is None:
            a.grad = np.zeros_like(av)
            a._own_grad = True
        elif not a._own_grad:
            a.grad = a.grad.copy()
            a._own_grad = True
        a.grad[offset : offset + size] += g.ravel()

    return Node(out, (a,), vjp, "segment")


_UFUNC_MAP = {
    np.exp: exp,
    np.log: log,
    np.sqrt: sqrt,
    np.tanh: tanh,
    np.add: add,
    np.subtract: sub,
    np.multiply: mul,
    np.true_divide: div,
    np.divide: div,
    np.negative: neg,
    np.power: power,
}


# -- parameter vector -------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    shape: tuple


class ParamVector:
    """Flat float64 parameter vector plus an immutable segment layout."""

    def __init__(self, values: np.ndarray, layout):
        values = np.ascontiguousarray(values, dtype=np.float64)
        layout = tuple(layout)
        total = sum(int(np.prod(s.shape)) for s in layout)
        if values.ndim != 1 or values.size != total:
            raise ValueError(
                f"flat vector length {values.size} does not match layout total {total}"
            )
        self.values = values
        self.layout = layout
        self._by_name = {s.name: s for s in layout}

    def __len__(self):
        return self.values.size

    def view(self, name: str) -> np.ndarray:
        s = self._by_name[name]
        size = int(np.prod(s.shape))
        return self.values[s.offset : s.offset + size].reshape(s.shape)

    def node_view(self, leaf: Node, name: str) -> Node:
        s = self._by_name[name]
        return segment(leaf, s.offset, int(np.prod(s.shape)), s.shape)

    def tensor(self, source, name: str):
        """Named tensor out of either the plain vector or a leaf Node."""
        if is_node(source):
            return self.node_view(source, name)
        return self.view(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def make_layout(spec):
    """Build a layout from an iterable of (name, shape) in storage order."""
    layout = []
    offset = 0
    for name, shape in spec:
        shape = tuple(int(s) for s in shape)
        layout.append(Segment(name, offset, shape))
        offset += int(np.prod(shape))
    return tuple(layout), offset


# -- drivers ----------------------------------------------------------------


def _backward(out: Node):
    topo = []
    seen = set()
    stack = [out]
    while stack:
        n = stack.pop()
        if id(n) in seen:
            continue
        seen.add(id(n))
        topo.append(n)
        stack.extend(n.parents)
    topo.sort(key=lambda n: n.nid, reverse=True)
    out.grad = np.float64(1.0)
    for n in topo:
        if n.vjp is not None and n.grad is not None:
            n.vjp(n.grad)
    # Release intermediate grad buffers; callers read leaves before this.
    return topo


def evaluate_with_gradient(objective, params):
    """Value and gradient of a scalar objective of a flat parameter vector.

    `objective` receives a leaf Node wrapping the flat vector and must return
    a scalar Node built from registered primitives.
    """
    if isinstance(params, ParamVector):
        flat = params.values
    else:
        flat = np.ascontiguousarray(params, dtype=np.float64)
        if flat.ndim != 1:
            raise ValueError("params must be a flat vector")
    leaf = Node(flat, op="params")
    out = objective(leaf)
    if not is_node(out):
        raise DiffgraphError("objective did not return a tape Node")
    if np.ndim(out.value) != 0:
        raise DiffgraphError(f"objective must be scalar, got shape {out.value.shape}")
    value = float(out.value)
    topo = _backward(out)
    grad = leaf.grad
    if grad is None:
        grad = np.zeros_like(flat)
    grad = np.asarray(grad, dtype=np.float64)
    _probe_finite(grad, "gradient")
    for n in topo:
        if n is not leaf:
            n.grad = None
    return value, grad


def batched_forward(objective, params, batch):
    """Mean of a per-sample objective over a batch, with gradient.

    `objective(leaf, batch)` must return a Node vector of per-sample values;
    the result is its arithmetic mean, so gradients flow through all samples.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("empty batch")

    def wrapped(leaf):
        vals = objective(leaf, batch)
        if not is_node(vals):
            raise DiffgraphError("batched objective did not return a tape Node")
        return mean(vals)

    return evaluate_with_gradient(wrapped, params)
