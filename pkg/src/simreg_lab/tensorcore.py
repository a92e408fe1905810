"""Dense float64 tensors with a small reverse-mode differentiation engine.

Graphs are plain ``Expr`` nodes built from the functions in this module and
evaluated against a mapping of input names to arrays.  Tensors are numpy
float64 arrays; shape rules follow numpy broadcasting for the elementwise
ops.  Every forward value is checked for NaN/Inf, and the first offending
node is reported.

Graphs are meant to be rebuilt each training step.  ``evaluate`` and
``gradient`` cache forward values and adjoints on the nodes, so a single
graph instance must not be evaluated from two threads at once.
"""

from __future__ import annotations

import builtins
import itertools
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Expr", "GraphError", "MissingBindingError", "ShapeError", "NonFiniteError",
    "input", "constant", "evaluate", "gradient", "finite_difference_gradient",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "softplus",
    "sigmoid", "silu", "sqrt", "power", "sum", "mean", "max", "transpose",
    "reshape", "concatenate", "slice_", "logsumexp", "l2_norm", "normalize",
    "cosine", "softmax", "take", "one_hot", "masked_fill",
]

_ids = itertools.count()
builtins_sum = builtins.sum


class GraphError(Exception):
    """Base error for graph construction and evaluation."""


class MissingBindingError(GraphError, KeyError):
    pass


class ShapeError(GraphError, ValueError):
    pass


class NonFiniteError(GraphError, FloatingPointError):
    def __init__(self, node: "Expr", message: str | None = None):
        self.node = node
        super().__init__(message or f"non-finite value produced by {node!r}")


class Expr:
    """A node in an expression graph.

    ``kind`` is one of ``"input"``, ``"constant"`` or ``"op"``.  Values and
    adjoints computed by the last ``evaluate``/``gradient`` call are kept in
    ``value`` and ``grad``.
    """

    __slots__ = ("kind", "op", "args", "attrs", "name", "shape", "value", "grad", "id")
    __array_priority__ = 100.0

    def __init__(self, kind, op=None, args=(), attrs=None, name=None, shape=None, value=None):
        self.kind = kind
        self.op = op
        self.args: tuple[Expr, ...] = tuple(args)
        self.attrs = attrs or {}
        self.name = name
        self.shape = shape
        self.value = value
        self.grad = None
        self.id = next(_ids)

    def __repr__(self):
        if self.kind == "input":
            return f"Expr(input {self.name!r})"
        if self.kind == "constant":
            return f"Expr(constant shape={np.shape(self.value)})"
        return f"Expr(op {self.op} #{self.id})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return slice_(self, index)

    @property
    def T(self):
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Evaluate a graph with no free inputs."""
        return evaluate(self, {})


def input(name: str, shape: Sequence[int] | None = None) -> Expr:
    return Expr("input", name=name, shape=tuple(shape) if shape is not None else None)


def constant(value) -> Expr:
    arr = np.asarray(value)
    if arr.dtype != np.bool_ and not np.issubdtype(arr.dtype, np.integer):
        arr = arr.astype(np.float64)
    return Expr("constant", value=arr, shape=arr.shape)


def _lift(x) -> Expr:
    return x if isinstance(x, Expr) else constant(x)


def _op(op: str, *args, **attrs) -> Expr:
    args = [_lift(a) for a in args]
    shapes = [a.shape for a in args]
    shape = None
    if all(s is not None for s in shapes):
        try:
            shape = _SHAPE_RULES[op](shapes, attrs)
        except (ValueError, IndexError, TypeError) as exc:
            raise ShapeError(f"{op}: operand shapes {shapes} rejected: {exc}") from exc
    return Expr("op", op=op, args=args, attrs=attrs, shape=shape)


# ---------------------------------------------------------------------------
# kernels: forward(values, attrs) -> array; backward(g, out, values, attrs)
# returns one adjoint (or None) per operand.
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _keep(g, shape, axis, keepdims):
    """Re-expand a reduced adjoint so it broadcasts against the input."""
    if axis is None:
        return np.broadcast_to(g, shape) if np.ndim(g) == 0 else np.broadcast_to(np.reshape(g, (1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return g


def _stable_softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


_stable_sigmoid = expit


def _fwd_max(v, a):
    return np.max(v[0], axis=a["axis"], keepdims=a["keepdims"])


def _bwd_max(g, out, v, a):
    x = v[0]
    o = out if a["keepdims"] or a["axis"] is None else np.expand_dims(out, a["axis"])
    hit = (x == o).astype(np.float64)
    hit /= hit.sum(axis=a["axis"], keepdims=True)
    return (hit * _keep(g, x.shape, a["axis"], a["keepdims"]),)


def _fwd_lse(v, a):
    x, axis, keepdims, mask = v[0], a["axis"], a["keepdims"], a["mask"]
    if mask is None:
        m = np.max(x, axis=axis, keepdims=True)
        s = np.sum(np.exp(x - m), axis=axis, keepdims=True)
        out = m + np.log(s)
    else:
        mask = np.broadcast_to(mask, x.shape)
        nonempty = mask.any(axis=axis, keepdims=True)
        m = np.max(np.where(mask, x, -np.inf), axis=axis, keepdims=True)
        m = np.where(nonempty, m, 0.0)
        s = np.sum(np.where(mask, np.exp(np.where(mask, x - m, 0.0)), 0.0), axis=axis, keepdims=True)
        out = np.where(nonempty, m + np.log(np.where(nonempty, s, 1.0)), 0.0)
    return out if keepdims else np.squeeze(out, axis=axis)


def _bwd_lse(g, out, v, a):
    x, axis, mask = v[0], a["axis"], a["mask"]
    o = out if a["keepdims"] else np.expand_dims(out, axis)
    w = np.exp(np.where(mask, x - o, -np.inf) if mask is not None else x - o)
    if mask is not None:
        w = np.where(np.broadcast_to(mask, x.shape), w, 0.0)
    return (w * _keep(g, x.shape, axis, a["keepdims"]),)


def _fwd_softmax(v, a):
    x = v[0]
    z = np.exp(x - np.max(x, axis=a["axis"], keepdims=True))
    return z / np.sum(z, axis=a["axis"], keepdims=True)


def _bwd_softmax(g, out, v, a):
    return (out * (g - np.sum(g * out, axis=a["axis"], keepdims=True)),)


def _fwd_normalize(v, a):
    x = v[0]
    n = np.sqrt(np.sum(x * x, axis=a["axis"], keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    return np.where(n > 0, x / safe, 0.0)


def _bwd_normalize(g, out, v, a):
    x = v[0]
    n = np.sqrt(np.sum(x * x, axis=a["axis"], keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    gx = (g - out * np.sum(g * out, axis=a["axis"], keepdims=True)) / safe
    return (np.where(n > 0, gx, 0.0),)


def _fwd_l2(v, a):
    return np.sqrt(np.sum(v[0] * v[0], axis=a["axis"], keepdims=a["keepdims"]))


def _bwd_l2(g, out, v, a):
    x = v[0]
    o = out if a["keepdims"] or a["axis"] is None else np.expand_dims(out, a["axis"])
    safe = np.where(o > 0, o, 1.0)
    return (np.where(o > 0, x / safe, 0.0) * _keep(g, x.shape, a["axis"], a["keepdims"]),)


def _bwd_silu(g, out, v, a):
    s = _stable_sigmoid(v[0])
    return (g * (s + out * (1.0 - s)),)


def _bwd_matmul(g, out, v, a):
    x, y = v
    if y.ndim == 2 and x.ndim > 2:
        # weight matrix shared across leading axes: fold them into rows
        gx = np.matmul(g, y.T)
        gy = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return _unbroadcast(gx, x.shape), gy
    gx = np.matmul(g, np.swapaxes(y, -1, -2))
    gy = np.matmul(np.swapaxes(x, -1, -2), g)
    return _unbroadcast(gx, x.shape), _unbroadcast(gy, y.shape)


def _fwd_take(v, a):
    return np.take(v[0], a["indices"], axis=a["axis"])


def _bwd_take(g, out, v, a):
    x = v[0]
    axis = a["axis"] % x.ndim
    gx = np.zeros_like(x)
    idx = np.asarray(a["indices"])
    moved = np.moveaxis(gx, axis, 0)
    gm = np.moveaxis(g, list(range(axis, axis + idx.ndim)), list(range(idx.ndim)))
    np.add.at(moved, idx, gm)
    return (gx,)


def _fwd_take_along(v, a):
    return np.take_along_axis(v[0], a["indices"], axis=a["axis"])


def _bwd_take_along(g, out, v, a):
    gx = np.zeros_like(v[0])
    idx = a["indices"]
    grids = list(np.indices(idx.shape, sparse=True))
    grids[a["axis"] % gx.ndim] = idx
    np.add.at(gx, tuple(grids), g)
    return (gx,)


def _bwd_slice(g, out, v, a):
    gx = np.zeros_like(v[0])
    gx[a["index"]] += g
    return (gx,)


def _fwd_concat(v, a):
    return np.concatenate(v, axis=a["axis"])


def _bwd_concat(g, out, v, a):
    splits = np.cumsum([x.shape[a["axis"]] for x in v])[:-1]
    return tuple(np.split(g, splits, axis=a["axis"]))


def _bwd_transpose(g, out, v, a):
    axes = a["axes"]
    if axes is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(axes)),)


def _bwd_masked_fill(g, out, v, a):
    return (np.where(a["mask"], 0.0, g),)


_KERNELS: dict[str, tuple[Callable, Callable]] = {
    "add": (lambda v, a: v[0] + v[1],
            lambda g, o, v, a: (_unbroadcast(g, v[0].shape), _unbroadcast(g, v[1].shape))),
    "sub": (lambda v, a: v[0] - v[1],
            lambda g, o, v, a: (_unbroadcast(g, v[0].shape), _unbroadcast(-g, v[1].shape))),
    "mul": (lambda v, a: v[0] * v[1],
            lambda g, o, v, a: (_unbroadcast(g * v[1], v[0].shape), _unbroadcast(g * v[0], v[1].shape))),
    "div": (lambda v, a: v[0] / v[1],
            lambda g, o, v, a: (_unbroadcast(g / v[1], v[0].shape),
                                _unbroadcast(-g * o / v[1], v[1].shape))),
    "neg": (lambda v, a: -v[0], lambda g, o, v, a: (-g,)),
    "matmul": (lambda v, a: np.matmul(v[0], v[1]), _bwd_matmul),
    "exp": (lambda v, a: np.exp(v[0]), lambda g, o, v, a: (g * o,)),
    "log": (lambda v, a: np.log(v[0]), lambda g, o, v, a: (g / v[0],)),
    "softplus": (lambda v, a: _stable_softplus(v[0]), lambda g, o, v, a: (g * _stable_sigmoid(v[0]),)),
    "sigmoid": (lambda v, a: _stable_sigmoid(v[0]), lambda g, o, v, a: (g * o * (1.0 - o),)),
    "silu": (lambda v, a: v[0] * _stable_sigmoid(v[0]), _bwd_silu),
    "sqrt": (lambda v, a: np.sqrt(v[0]), lambda g, o, v, a: (g * 0.5 / o,)),
    "power": (lambda v, a: np.power(v[0], a["p"]),
              lambda g, o, v, a: (g * a["p"] * np.power(v[0], a["p"] - 1),)),
    "sum": (lambda v, a: np.sum(v[0], axis=a["axis"], keepdims=a["keepdims"]),
            lambda g, o, v, a: (np.broadcast_to(_keep(g, v[0].shape, a["axis"], a["keepdims"]), v[0].shape).copy(),)),
    "mean": (lambda v, a: np.mean(v[0], axis=a["axis"], keepdims=a["keepdims"]),
             lambda g, o, v, a: (np.broadcast_to(_keep(g, v[0].shape, a["axis"], a["keepdims"]), v[0].shape)
                                 * (np.size(o) / np.size(v[0])),)),
    "max": (_fwd_max, _bwd_max),
    "transpose": (lambda v, a: np.transpose(v[0], a["axes"]), _bwd_transpose),
    "reshape": (lambda v, a: np.reshape(v[0], a["shape"]), lambda g, o, v, a: (np.reshape(g, v[0].shape),)),
    "concatenate": (_fwd_concat, _bwd_concat),
    "slice": (lambda v, a: v[0][a["index"]], _bwd_slice),
    "logsumexp": (_fwd_lse, _bwd_lse),
    "l2_norm": (_fwd_l2, _bwd_l2),
    "normalize": (_fwd_normalize, _bwd_normalize),
    "softmax": (_fwd_softmax, _bwd_softmax),
    "take": (_fwd_take, _bwd_take),
    "take_along": (_fwd_take_along, _bwd_take_along),
    "masked_fill": (lambda v, a: np.where(a["mask"], a["value"], v[0]), _bwd_masked_fill),
}



# ---------------------------------------------------------------------------
# static shape rules (checked when a node is built, if operand shapes are known)
# ---------------------------------------------------------------------------

def _dummy(shape):
    return np.broadcast_to(np.zeros(()), shape)


def _reduced(shape, axis, keepdims):
    if axis is None:
        return (1,) * len(shape) if keepdims else ()
    axes = (axis,) if np.ndim(axis) == 0 else tuple(axis)
    axes = tuple(a % len(shape) for a in axes)
    if keepdims:
        return tuple(1 if i in axes else s for i, s in enumerate(shape))
    return tuple(s for i, s in enumerate(shape) if i not in axes)


def _matmul_shape(s, a):
    x, y = s
    if len(x) < 2 or len(y) < 2:
        raise ValueError("matmul operands need at least two axes")
    if x[-1] != y[-2]:
        raise ValueError(f"inner extents differ: {x[-1]} vs {y[-2]}")
    return np.broadcast_shapes(x[:-2], y[:-2]) + (x[-2], y[-1])


def _concat_shape(s, a):
    axis = a["axis"] % len(s[0])
    for other in s[1:]:
        if len(other) != len(s[0]) or any(o != f for i, (o, f) in enumerate(zip(other, s[0])) if i != axis):
            raise ValueError("concatenate operands disagree off the join axis")
    out = list(s[0])
    out[axis] = builtins_sum(t[axis] for t in s)
    return tuple(out)


def _elementwise(s, a):
    return np.broadcast_shapes(*s)


def _same(s, a):
    return s[0]


def _lse_shape(s, a):
    if a["mask"] is not None:
        np.broadcast_shapes(a["mask"].shape, s[0])
    return _reduced(s[0], a["axis"], a["keepdims"])


def _masked_fill_shape(s, a):
    if np.broadcast_shapes(a["mask"].shape, s[0]) != s[0]:
        raise ValueError("mask must broadcast to the filled tensor")
    return s[0]


_SHAPE_RULES: dict[str, Callable] = {
    "add": _elementwise, "sub": _elementwise, "mul": _elementwise, "div": _elementwise,
    "neg": _same, "exp": _same, "log": _same, "softplus": _same, "sigmoid": _same,
    "silu": _same, "sqrt": _same, "power": _same, "normalize": _same, "softmax": _same,
    "masked_fill": _masked_fill_shape,
    "matmul": _matmul_shape,
    "sum": lambda s, a: _reduced(s[0], a["axis"], a["keepdims"]),
    "mean": lambda s, a: _reduced(s[0], a["axis"], a["keepdims"]),
    "max": lambda s, a: _reduced(s[0], a["axis"], a["keepdims"]),
    "l2_norm": lambda s, a: _reduced(s[0], a["axis"], a["keepdims"]),
    "logsumexp": _lse_shape,
    "transpose": lambda s, a: np.transpose(_dummy(s[0]), a["axes"]).shape,
    "reshape": lambda s, a: np.reshape(_dummy(s[0]), a["shape"]).shape,
    "concatenate": _concat_shape,
    "slice": lambda s, a: _dummy(s[0])[a["index"]].shape,
    "take": lambda s, a: np.take(_dummy(s[0]), a["indices"], axis=a["axis"]).shape,
    "take_along": lambda s, a: np.take_along_axis(_dummy(s[0]), a["indices"], axis=a["axis"]).shape,
}

# ---------------------------------------------------------------------------
# public op constructors
# ---------------------------------------------------------------------------

def add(x, y) -> Expr:
    return _op("add", x, y)


def sub(x, y) -> Expr:
    return _op("sub", x, y)


def mul(x, y) -> Expr:
    return _op("mul", x, y)


def div(x, y) -> Expr:
    return _op("div", x, y)


def neg(x) -> Expr:
    return _op("neg", x)


def matmul(x, y) -> Expr:
    """Batched matrix product; both operands need at least two axes."""
    return _op("matmul", x, y)


def exp(x) -> Expr:
    return _op("exp", x)


def log(x) -> Expr:
    return _op("log", x)


def softplus(x) -> Expr:
    """``log(1 + e^x)`` evaluated as ``max(x, 0) + log1p(exp(-|x|))``."""
    return _op("softplus", x)


def sigmoid(x) -> Expr:
    return _op("sigmoid", x)


def silu(x) -> Expr:
    return _op("silu", x)


def sqrt(x) -> Expr:
    return _op("sqrt", x)


def power(x, p: float) -> Expr:
    return _op("power", x, p=float(p))


def sum(x, axis=None, keepdims: bool = False) -> Expr:  # noqa: A001
    return _op("sum", x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Expr:
    return _op("mean", x, axis=axis, keepdims=keepdims)


def max(x, axis=None, keepdims: bool = False) -> Expr:  # noqa: A001
    return _op("max", x, axis=axis, keepdims=keepdims)


def transpose(x, axes: Sequence[int] | None = None) -> Expr:
    return _op("transpose", x, axes=tuple(axes) if axes is not None else None)


def reshape(x, shape: Sequence[int]) -> Expr:
    return _op("reshape", x, shape=tuple(shape))


def concatenate(xs: Iterable, axis: int = 0) -> Expr:
    return _op("concatenate", *list(xs), axis=axis)


def slice_(x, index) -> Expr:
    """Basic (non-fancy) numpy indexing: ints, slices, Ellipsis, None."""
    return _op("slice", x, index=index)


def logsumexp(x, axis: int = -1, keepdims: bool = False, mask=None) -> Expr:
    """Max-shifted log-sum-exp along ``axis``.

    With a boolean ``mask`` only the selected entries take part; a slice with
    no selected entry evaluates to 0 and receives no gradient.
    """
    if axis is None:
        raise ValueError("logsumexp needs an explicit axis")
    m = None if mask is None else np.asarray(mask, dtype=bool)
    return _op("logsumexp", x, axis=axis, keepdims=keepdims, mask=m)


def l2_norm(x, axis: int = -1, keepdims: bool = False) -> Expr:
    return _op("l2_norm", x, axis=axis, keepdims=keepdims)


def normalize(x, axis: int = -1) -> Expr:
    """Scale to unit L2 norm along ``axis``; zero vectors map to zero."""
    return _op("normalize", x, axis=axis)


def cosine(u, v, axis: int = -1) -> Expr:
    """Cosine similarity along ``axis``; 0 whenever either side has zero norm."""
    return sum(mul(normalize(u, axis), normalize(v, axis)), axis=axis)


def softmax(x, axis: int = -1) -> Expr:
    return _op("softmax", x, axis=axis)


def take(x, indices, axis: int = 0) -> Expr:
    """Gather slices of ``x`` at integer ``indices`` (embedding lookup)."""
    return _op("take", x, indices=np.asarray(indices, dtype=np.intp), axis=axis)


def take_along(x, indices, axis: int = -1) -> Expr:
    return _op("take_along", x, indices=np.asarray(indices, dtype=np.intp), axis=axis)


def one_hot(indices, depth: int) -> Expr:
    idx = np.asarray(indices, dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= depth):
        raise ValueError(f"one_hot index out of range for depth {depth}")
    return constant(np.eye(depth)[idx])


def masked_fill(x, mask, value) -> Expr:
    """Replace entries where ``mask`` is true by ``value`` (no gradient there)."""
    return _op("masked_fill", x, mask=np.asarray(mask, dtype=bool), value=np.asarray(value, dtype=np.float64))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _toposort(root: Expr) -> list[Expr]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        for arg in reversed(node.args):
            if arg.id not in seen:
                stack.append((arg, False))
    return order


def _forward(order: list[Expr], bindings: Mapping[str, np.ndarray]) -> None:
    for node in order:
        node.grad = None
        if node.kind == "input":
            if node.name not in bindings:
                raise MissingBindingError(f"no binding for input {node.name!r}")
            val = np.asarray(bindings[node.name], dtype=np.float64)
            if node.shape is not None and val.shape != node.shape:
                raise ShapeError(f"input {node.name!r} expects shape {node.shape}, got {val.shape}")
            node.value = val
        elif node.kind == "op":
            fwd = _KERNELS[node.op][0]
            try:
                with np.errstate(all="ignore"):
                    node.value = fwd([a.value for a in node.args], node.attrs)
            except ValueError as exc:
                shapes = [np.shape(a.value) for a in node.args]
                raise ShapeError(f"{node!r} rejected operand shapes {shapes}: {exc}") from exc
        if node.value.dtype.kind == "f" and not np.isfinite(node.value).all():
            raise NonFiniteError(node)


def evaluate(root: Expr, bindings: Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Forward value of ``root`` given input bindings."""
    order = _toposort(root)
    _forward(order, bindings or {})
    return root.value


def gradient(root: Expr, bindings: Mapping[str, np.ndarray] | None, wrt: Sequence[str]) -> dict[str, np.ndarray]:
    """Reverse-mode derivative of scalar ``root`` with respect to named inputs."""
    bindings = bindings or {}
    order = _toposort(root)
    inputs = {n.name: n for n in order if n.kind == "input"}
    for name in wrt:
        if name not in inputs and name not in bindings:
            raise MissingBindingError(f"unknown input {name!r}")
    _forward(order, bindings)
    if np.size(root.value) != 1:
        raise ShapeError(f"gradient needs a scalar root, got shape {np.shape(root.value)}")

    wanted = set(wrt)
    live: set[int] = set()
    for node in order:
        if (node.kind == "input" and node.name in wanted) or any(a.id in live for a in node.args):
            live.add(node.id)

    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node.kind != "op" or node.grad is None or node.id not in live:
            continue
        bwd = _KERNELS[node.op][1]
        with np.errstate(all="ignore"):
            grads = bwd(node.grad, node.value, [a.value for a in node.args], node.attrs)
        for arg, g in zip(node.args, grads):
            if g is None or arg.id not in live:
                continue
            arg.grad = g if arg.grad is None else arg.grad + g

    out = {}
    for name in wrt:
        node = inputs.get(name)
        if node is None or node.grad is None:
            out[name] = np.zeros_like(np.asarray(bindings[name], dtype=np.float64))
        else:
            out[name] = np.array(node.grad, dtype=np.float64).reshape(node.value.shape)
    return out


def finite_difference_gradient(f: Callable[[np.ndarray], float], point, eps: float = 1e-6,
                               order: int = 2) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    ``order=4`` uses the five-point stencil, whose O(eps^4) truncation error
    allows a larger ``eps`` and hence less rounding noise.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    if order == 2:
        stencil = ((1.0, 0.5),)
    elif order == 4:
        stencil = ((1.0, 2.0 / 3.0), (2.0, -1.0 / 12.0))
    else:
        raise ValueError("order must be 2 or 4")
    x = np.array(point, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for j in range(flat.size):
        orig = flat[j]
        acc = 0.0
        for step, weight in stencil:
            flat[j] = orig + step * eps
            hi = float(f(x))
            flat[j] = orig - step * eps
            lo = float(f(x))
            if not (np.isfinite(hi) and np.isfinite(lo)):
                flat[j] = orig
                raise NonFiniteError(None, f"non-finite function value near coordinate {j}")
            acc += weight * (hi - lo)
        flat[j] = orig
        gflat[j] = acc / eps
    return grad
