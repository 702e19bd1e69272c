"""Tape-based reverse-mode automatic differentiation over dense float64 arrays.

Every primitive records its value eagerly on a :class:`Tape`.  Reverse passes
are written once against an ops namespace: :data:`NUMPY_OPS` evaluates the
vector-Jacobian products directly (the tape is only read), while
:class:`TapeOps` records them as new nodes so the gradient itself can be
differentiated again (double backprop).

Broadcasting is deliberately narrow: elementwise binary ops accept equal
shapes, a scalar operand, or a trailing row vector (bias).  Anything else
must go through an explicit ``broadcast`` node.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "NonFiniteError",
    "UnknownOpError",
    "Node",
    "Tape",
    "Var",
    "GradMap",
    "TapeOps",
    "NUMPY_OPS",
    "OP_KINDS",
    "backward",
    "grad",
    "grad_of_grad",
    "flatten",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""

    def __init__(self, op: str, node_id: int):
        super().__init__(f"non-finite value produced by {op!r} at node {node_id}")
        self.op = op
        self.node_id = node_id


class UnknownOpError(ValueError):
    pass


@dataclass(frozen=True)
class Node:
    op: str
    inputs: tuple[int, ...]
    attrs: dict
    value: np.ndarray


@dataclass
class Tape:
    """Append-only record of primitive ops.

    ``backward_passes`` counts reverse sweeps started on this tape.
    """

    nodes: list[Node] = field(default_factory=list)
    backward_passes: int = 0

    def __len__(self) -> int:
        return len(self.nodes)

    def _append(self, op: str, inputs: tuple[int, ...], attrs: dict, value: np.ndarray) -> Var:
        value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise NonFiniteError(op, len(self.nodes))
        value.setflags(write=False)
        self.nodes.append(Node(op, inputs, attrs, value))
        return Var(self, len(self.nodes) - 1)

    def leaf(self, value, name: str | None = None) -> Var:
        """Differentiable input."""
        return self._append("leaf", (), {"name": name}, np.array(value, dtype=np.float64))

    def constant(self, value) -> Var:
        """Input that never receives an adjoint."""
        return self._append("const", (), {}, np.array(value, dtype=np.float64))

    def record(self, op_kind: str, inputs: Sequence[Var | int], **attrs) -> Var:
        spec = _OPS.get(op_kind)
        if spec is None:
            raise UnknownOpError(f"unknown op kind {op_kind!r}")
        ids = []
        for x in inputs:
            i = x.id if isinstance(x, Var) else int(x)
            if isinstance(x, Var) and x.tape is not self:
                raise ValueError("input belongs to a different tape")
            if not 0 <= i < len(self.nodes):
                raise ValueError(f"input node {i} is not on the tape")
            ids.append(i)
        values = [self.nodes[i].value for i in ids]
        if spec.check is not None:
            spec.check(op_kind, *values, **attrs)
        return self._append(op_kind, tuple(ids), attrs, spec.forward(*values, **attrs))

    def value(self, x: Var | int) -> np.ndarray:
        return self.nodes[x.id if isinstance(x, Var) else x].value

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from its recorded inputs."""
        out: list[np.ndarray] = []
        for node in self.nodes:
            if node.op in ("leaf", "const"):
                out.append(node.value)
            else:
                args = [out[i] for i in node.inputs]
                out.append(np.asarray(_OPS[node.op].forward(*args, **node.attrs), dtype=np.float64))
        return out


class Var:
    """Handle to a node on a tape."""

    __slots__ = ("tape", "id")
    __array_priority__ = 1000

    def __init__(self, tape: Tape, node_id: int):
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def size(self) -> int:
        return self.value.size

    def __repr__(self) -> str:
        return f"Var(id={self.id}, op={self.tape.nodes[self.id].op!r}, shape={self.shape})"

    def _ops(self) -> TapeOps:
        return TapeOps(self.tape)

    def __add__(self, other):
        return self._ops().add(self, other)

    def __radd__(self, other):
        return self._ops().add(other, self)

    def __sub__(self, other):
        return self._ops().sub(self, other)

    def __rsub__(self, other):
        return self._ops().sub(other, self)

    def __mul__(self, other):
        return self._ops().mul(self, other)

    def __rmul__(self, other):
        return self._ops().mul(other, self)

    def __truediv__(self, other):
        return self._ops().div(self, other)

    def __rtruediv__(self, other):
        return self._ops().div(other, self)

    def __neg__(self):
        return self._ops().neg(self)

    def __matmul__(self, other):
        return self._ops().matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return self._ops().sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return self._ops().mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return self._ops().reshape(self, shape)

    def __getitem__(self, index):
        return self._ops().slice(self, index)


# ---------------------------------------------------------------------------
# shape helpers


def _binary_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    sa, sb = a.shape, b.shape
    if sa == sb or sa == () or sb == ():
        return
    if b.ndim == 1 and sa[-1:] == sb:
        return
    if a.ndim == 1 and sb[-1:] == sa:
        return
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb}")


def _sum_to(x: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if x.shape == tuple(shape):
        return x
    if x.ndim == len(shape) and x.shape[:-1] == tuple(shape[:-1]) and shape[-1] == 1:
        return fast_sum(x, axis=-1, keepdims=True)
    lead = x.ndim - len(shape)
    if lead < 0:
        raise ShapeError(f"sum_to: cannot reduce {x.shape} to {shape}")
    axes = tuple(range(lead)) + tuple(
        lead + i for i, s in enumerate(shape) if s == 1 and x.shape[lead + i] != 1
    )
    out = x.sum(axis=axes, keepdims=True) if axes else x
    return out.reshape(shape)


def _check_sum_to(op, x, *, shape):
    shape = tuple(shape)
    try:
        if np.broadcast_shapes(shape, x.shape) != x.shape:
            raise ValueError
    except ValueError:
        raise ShapeError(f"sum_to: {shape} does not broadcast to {x.shape}") from None


def _check_broadcast(op, x, *, shape):
    try:
        np.broadcast_shapes(x.shape, tuple(shape))
        if np.broadcast_shapes(x.shape, tuple(shape)) != tuple(shape):
            raise ValueError
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {tuple(shape)}") from None


def _check_matmul(op, a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ba, bb = a.shape[:-2], b.shape[:-2]
    if ba and bb and ba != bb:
        raise ShapeError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")


def _check_dot(op, a, b):
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"dot needs equal-length vectors, got {a.shape} and {b.shape}")


def _check_reshape(op, x, *, shape):
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}")


def _check_concat(op, *xs, axis):
    if not xs:
        raise ShapeError("concat of nothing")
    ref = xs[0].shape
    ax = axis % len(ref) if ref else 0
    for x in xs[1:]:
        if x.ndim != len(ref) or any(s != r for k, (s, r) in enumerate(zip(x.shape, ref)) if k != ax):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} disagree off axis {axis}")


def _check_slice(op, x, *, index):
    try:
        x[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc}") from None


def _check_scatter(op, x, *, index, shape):
    if np.zeros(shape)[index].shape != x.shape:
        raise ShapeError(f"scatter: value {x.shape} does not fit index {index} of {shape}")


def _check_transpose(op, x, *, axes):
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for rank {x.ndim}")


def _norm_index(index) -> tuple:
    if not isinstance(index, tuple):
        index = (index,)
    for part in index:
        if not isinstance(part, (slice, int, np.integer)):
            raise ShapeError("slice supports only integer and slice indices")
    return index


# ---------------------------------------------------------------------------
# ops namespaces used by reverse rules


class _NumpyOps:
    """Reverse-rule backend that evaluates directly on arrays."""

    @staticmethod
    def const(x):
        return np.asarray(x, dtype=np.float64)

    @staticmethod
    def value(x):
        return x

    add = staticmethod(np.add)
    sub = staticmethod(np.subtract)
    mul = staticmethod(np.multiply)
    div = staticmethod(np.divide)
    neg = staticmethod(np.negative)
    exp = staticmethod(np.exp)
    log = staticmethod(np.log)
    sqrt = staticmethod(np.sqrt)
    square = staticmethod(np.square)
    tanh = staticmethod(np.tanh)

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def sum(x, axis=None, keepdims=False):
        return fast_sum(x, axis=axis, keepdims=keepdims)

    @staticmethod
    def broadcast(x, shape):
        return _fwd_broadcast(x, tuple(shape))

    @staticmethod
    def sum_to(x, shape):
        return _sum_to(np.asarray(x), tuple(shape))

    @staticmethod
    def reshape(x, shape):
        return np.reshape(x, tuple(shape))

    @staticmethod
    def transpose(x, axes):
        return np.transpose(x, axes)

    @staticmethod
    def slice(x, index):
        return x[_norm_index(index)]

    @staticmethod
    def scatter(x, index, shape):
        out = np.zeros(shape)
        out[_norm_index(index)] = x
        return out


NUMPY_OPS = _NumpyOps()


class TapeOps:
    """Reverse-rule backend that records every step on ``tape``."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def const(self, x) -> Var:
        return x if isinstance(x, Var) else self.tape.constant(x)

    def value(self, x):
        return x.value if isinstance(x, Var) else np.asarray(x)

    def _v(self, x) -> Var:
        return x if isinstance(x, Var) else self.tape.constant(x)

    def _rec(self, op, *xs, **attrs) -> Var:
        return self.tape.record(op, [self._v(x) for x in xs], **attrs)

    def add(self, a, b):
        return self._rec("add", a, b)

    def sub(self, a, b):
        return self._rec("sub", a, b)

    def mul(self, a, b):
        return self._rec("mul", a, b)

    def div(self, a, b):
        return self._rec("div", a, b)

    def neg(self, a):
        return self._rec("neg", a)

    def exp(self, a):
        return self._rec("exp", a)

    def log(self, a):
        return self._rec("log", a)

    def sqrt(self, a):
        return self._rec("sqrt", a)

    def square(self, a):
        return self._rec("square", a)

    def tanh(self, a):
        return self._rec("tanh", a)

    def sigmoid(self, a):
        return self._rec("sigmoid", a)

    def relu(self, a):
        return self._rec("relu", a)

    def matmul(self, a, b):
        return self._rec("matmul", a, b)

    def dot(self, a, b):
        return self._rec("dot", a, b)

    def sum(self, x, axis=None, keepdims=False):
        return self._rec("sum", x, axis=axis, keepdims=keepdims)

    def mean(self, x, axis=None, keepdims=False):
        return self._rec("mean", x, axis=axis, keepdims=keepdims)

    def broadcast(self, x, shape):
        return self._rec("broadcast", x, shape=tuple(shape))

    def sum_to(self, x, shape):
        return self._rec("sum_to", x, shape=tuple(shape))

    def reshape(self, x, shape):
        return self._rec("reshape", x, shape=tuple(shape))

    def transpose(self, x, axes):
        return self._rec("transpose", x, axes=tuple(axes))

    def slice(self, x, index):
        return self._rec("slice", x, index=_norm_index(index))

    def scatter(self, x, index, shape):
        return self._rec("scatter", x, index=_norm_index(index), shape=tuple(shape))

    def concat(self, xs, axis=0):
        return self.tape.record("concat", [self._v(x) for x in xs], axis=axis)


# ---------------------------------------------------------------------------
# primitive table


@dataclass(frozen=True)
class _Op:
    forward: Callable[..., np.ndarray]
    vjp: Callable[..., tuple]
    check: Callable[..., None] | None = None


def _unbroadcast(F, g, shape, out_shape):
    return g if tuple(shape) == tuple(out_shape) else F.sum_to(g, shape)


def _vjp_add(F, g, out, a, b, **_):
    s = F.value(out).shape
    return _unbroadcast(F, g, F.value(a).shape, s), _unbroadcast(F, g, F.value(b).shape, s)


def _vjp_sub(F, g, out, a, b, **_):
    s = F.value(out).shape
    return _unbroadcast(F, g, F.value(a).shape, s), _unbroadcast(F, F.neg(g), F.value(b).shape, s)


def _vjp_mul(F, g, out, a, b, **_):
    s = F.value(out).shape
    return (
        _unbroadcast(F, F.mul(g, b), F.value(a).shape, s),
        _unbroadcast(F, F.mul(g, a), F.value(b).shape, s),
    )


def _vjp_div(F, g, out, a, b, **_):
    s = F.value(out).shape
    ga = F.div(g, b)
    gb = F.neg(F.div(F.mul(g, out), b))
    return _unbroadcast(F, ga, F.value(a).shape, s), _unbroadcast(F, gb, F.value(b).shape, s)


def _swap_last(F, x):
    nd = F.value(x).ndim
    axes = list(range(nd))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return F.transpose(x, axes)


def _vjp_matmul(F, g, out, a, b, **_):
    ga = F.matmul(g, _swap_last(F, b))
    gb = F.matmul(_swap_last(F, a), g)
    sa, sb = F.value(a).shape, F.value(b).shape
    return _unbroadcast(F, ga, sa, F.value(ga).shape), _unbroadcast(F, gb, sb, F.value(gb).shape)


def _vjp_dot(F, g, out, a, b, **_):
    return F.mul(g, b), F.mul(g, a)


def _vjp_relu(F, g, out, a, **_):
    mask = F.const((F.value(a) > 0.0).astype(np.float64))
    return (F.mul(g, mask),)


def _vjp_exp(F, g, out, a, **_):
    return (F.mul(g, out),)


def _vjp_log(F, g, out, a, **_):
    return (F.div(g, a),)


def _vjp_sqrt(F, g, out, a, **_):
    return (F.div(g, F.mul(out, F.const(2.0))),)


def _vjp_square(F, g, out, a, **_):
    return (F.mul(g, F.mul(a, F.const(2.0))),)


def _vjp_neg(F, g, out, a, **_):
    return (F.neg(g),)


def _vjp_tanh(F, g, out, a, **_):
    return (F.mul(g, F.sub(F.const(1.0), F.square(out))),)


def _vjp_sigmoid(F, g, out, a, **_):
    return (F.mul(g, F.mul(out, F.sub(F.const(1.0), out))),)


def _kept_shape(shape, axis):
    if axis is None:
        return (1,) * len(shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = {ax % len(shape) for ax in axes}
    return tuple(1 if i in axes else s for i, s in enumerate(shape))


def _vjp_sum(F, g, out, a, *, axis=None, keepdims=False):
    shape = F.value(a).shape
    return (F.broadcast(F.reshape(g, _kept_shape(shape, axis)), shape),)


def _vjp_mean(F, g, out, a, *, axis=None, keepdims=False):
    shape = F.value(a).shape
    count = F.value(a).size // max(F.value(out).size, 1)
    g = F.div(g, F.const(float(count)))
    return (F.broadcast(F.reshape(g, _kept_shape(shape, axis)), shape),)


def _vjp_broadcast(F, g, out, a, *, shape):
    return (F.sum_to(g, F.value(a).shape),)


def _vjp_sum_to(F, g, out, a, *, shape):
    return (F.broadcast(g, F.value(a).shape),)


def _vjp_reshape(F, g, out, a, *, shape):
    return (F.reshape(g, F.value(a).shape),)


def _vjp_transpose(F, g, out, a, *, axes):
    return (F.transpose(g, tuple(np.argsort(axes))),)


def _vjp_slice(F, g, out, a, *, index):
    return (F.scatter(g, index, F.value(a).shape),)


def _vjp_scatter(F, g, out, a, *, index, shape):
    return (F.slice(g, index),)


def _vjp_concat(F, g, out, *xs, axis):
    grads = []
    start = 0
    nd = F.value(out).ndim
    ax = axis % nd
    for x in xs:
        n = F.value(x).shape[ax]
        index = tuple(slice(None) for _ in range(ax)) + (slice(start, start + n),)
        grads.append(F.slice(g, index))
        start += n
    return tuple(grads)


def fast_sum(a: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    """np.sum, but reductions over a short trailing axis go through a matvec."""
    if axis is not None and a.ndim >= 1 and isinstance(axis, (int, np.integer)) and axis % a.ndim == a.ndim - 1:
        r = a @ np.ones(a.shape[-1])
        return r[..., None] if keepdims else r
    return np.sum(a, axis=axis, keepdims=keepdims)


def fast_mean(a: np.ndarray, axis=None, keepdims=False) -> np.ndarray:
    if axis is not None and a.ndim >= 1 and isinstance(axis, (int, np.integer)) and axis % a.ndim == a.ndim - 1:
        return fast_sum(a, axis, keepdims) / a.shape[-1]
    return np.mean(a, axis=axis, keepdims=keepdims)


def last_axis_max(a: np.ndarray) -> np.ndarray:
    """Max over the trailing axis, keepdims."""
    if a.shape[-1] <= 8:
        out = a[..., 0]
        for i in range(1, a.shape[-1]):
            out = np.maximum(out, a[..., i])
        return out[..., None]
    return np.max(a, axis=-1, keepdims=True)


def _fwd_broadcast(a, shape):
    shape = tuple(shape)
    if shape and a.ndim == len(shape) and a.shape[:-1] == shape[:-1] and a.shape[-1] == 1:
        return np.repeat(a, shape[-1], axis=-1)
    return np.broadcast_to(a, shape).copy()


def _fwd_concat(*xs, axis):
    return np.concatenate(xs, axis=axis)


def _fwd_scatter(x, *, index, shape):
    out = np.zeros(shape)
    out[index] = x
    return out


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _check_unary_positive(op, a):
    if op == "log" and np.any(a <= 0):
        raise FloatingPointError("log of non-positive value")
    if op == "sqrt" and np.any(a < 0):
        raise FloatingPointError("sqrt of negative value")


_OPS: dict[str, _Op] = {
    "add": _Op(np.add, _vjp_add, _binary_shape),
    "sub": _Op(np.subtract, _vjp_sub, _binary_shape),
    "mul": _Op(np.multiply, _vjp_mul, _binary_shape),
    "div": _Op(np.divide, _vjp_div, _binary_shape),
    "neg": _Op(np.negative, _vjp_neg),
    "matmul": _Op(np.matmul, _vjp_matmul, _check_matmul),
    "dot": _Op(lambda a, b: np.array(a @ b), _vjp_dot, _check_dot),
    "relu": _Op(lambda a: np.maximum(a, 0.0), _vjp_relu),
    "exp": _Op(np.exp, _vjp_exp),
    "log": _Op(np.log, _vjp_log, _check_unary_positive),
    "sqrt": _Op(np.sqrt, _vjp_sqrt, _check_unary_positive),
    "square": _Op(np.square, _vjp_square),
    "tanh": _Op(np.tanh, _vjp_tanh),
    "sigmoid": _Op(_sigmoid, _vjp_sigmoid),
    "sum": _Op(fast_sum, _vjp_sum),
    "mean": _Op(fast_mean, _vjp_mean),
    "broadcast": _Op(_fwd_broadcast, _vjp_broadcast, _check_broadcast),
    "sum_to": _Op(lambda a, shape: _sum_to(a, tuple(shape)).copy(), _vjp_sum_to, _check_sum_to),
    "reshape": _Op(lambda a, shape: a.reshape(shape).copy(), _vjp_reshape, _check_reshape),
    "transpose": _Op(lambda a, axes: np.ascontiguousarray(np.transpose(a, axes)), _vjp_transpose, _check_transpose),
    "slice": _Op(lambda a, index: np.array(a[index]), _vjp_slice, _check_slice),
    "scatter": _Op(_fwd_scatter, _vjp_scatter, _check_scatter),
    "concat": _Op(_fwd_concat, _vjp_concat, _check_concat),
}

OP_KINDS = tuple(sorted(_OPS))


# ---------------------------------------------------------------------------
# reverse sweeps


class GradMap(dict):
    """node id -> adjoint (ndarray, or Var when the sweep was recorded)."""

    def of(self, x: Var):
        return self.get(x.id)


def _relevant(tape: Tape, root: int, wrt: Sequence[int] | None) -> list[int]:
    nodes = tape.nodes
    anc = np.zeros(root + 1, dtype=bool)
    anc[root] = True
    for i in range(root, -1, -1):
        if anc[i]:
            for j in nodes[i].inputs:
                anc[j] = True
    if wrt is not None:
        lo = min(wrt) if wrt else root + 1
        desc = np.zeros(root + 1, dtype=bool)
        for w in wrt:
            if w <= root:
                desc[w] = True
        for i in range(lo, root + 1):
            if not desc[i] and any(desc[j] for j in nodes[i].inputs):
                desc[i] = True
        anc &= desc
    return [i for i in range(root, -1, -1) if anc[i]]


def backward(
    tape: Tape,
    root: Var | int,
    seed=None,
    *,
    wrt: Sequence[Var | int] | None = None,
    create_graph: bool = False,
) -> GradMap:
    """Reverse sweep from ``root``.

    Returns adjoints (seed-weighted partials of ``root``) for every ancestor
    of ``root``, or only for nodes on a path from ``wrt`` when given.  With
    ``create_graph`` the sweep is recorded on ``tape`` and adjoints are
    ``Var``s; otherwise the tape is left untouched.
    """
    rid = root.id if isinstance(root, Var) else int(root)
    if isinstance(root, Var) and root.tape is not tape:
        raise ValueError("root belongs to a different tape")
    if not 0 <= rid < len(tape.nodes):
        raise ValueError(f"root node {rid} is not on the tape")
    rval = tape.nodes[rid].value
    if seed is None:
        if rval.size != 1:
            raise ShapeError(f"seed required for non-scalar root of shape {rval.shape}")
        seed = np.ones_like(rval)
    else:
        seed = np.asarray(seed.value if isinstance(seed, Var) else seed, dtype=np.float64)
        if seed.shape != rval.shape:
            raise ShapeError(f"seed shape {seed.shape} does not match root shape {rval.shape}")

    wrt_ids = None if wrt is None else [w.id if isinstance(w, Var) else int(w) for w in wrt]
    order = _relevant(tape, rid, wrt_ids)
    tape.backward_passes += 1

    if create_graph:
        F = TapeOps(tape)
        seed_node = tape.constant(seed)
        adj: dict[int, Any] = {rid: seed_node}
        fetch = lambda i: Var(tape, i)  # noqa: E731
    else:
        F = NUMPY_OPS
        adj = {rid: seed}
        fetch = lambda i: tape.nodes[i].value  # noqa: E731

    keep = set(order)
    nodes = tape.nodes
    for i in order:
        g = adj.get(i)
        node = nodes[i]
        if g is None or node.op in ("leaf", "const"):
            continue
        ins = [fetch(j) for j in node.inputs]
        grads = _OPS[node.op].vjp(F, g, fetch(i), *ins, **node.attrs)
        for j, gj in zip(node.inputs, grads):
            if gj is None or j not in keep or nodes[j].op == "const":
                continue
            prev = adj.get(j)
            adj[j] = gj if prev is None else F.add(prev, gj)

    return GradMap((i, adj[i]) for i in sorted(adj) if i in keep and nodes[i].op != "const")


def grad(root: Var, wrt: Sequence[Var], *, seed=None, create_graph: bool = False) -> list:
    """Adjoints of ``root`` for each of ``wrt`` (zeros where unreachable)."""
    tape = root.tape
    gm = backward(tape, root, seed, wrt=wrt, create_graph=create_graph)
    out = []
    for w in wrt:
        g = gm.get(w.id)
        if g is None:
            g = tape.constant(np.zeros(w.shape)) if create_graph else np.zeros(w.shape)
        out.append(g)
    return out


def flatten(xs: Sequence[Var]) -> Var:
    """Concatenate row-major flattenings of ``xs`` into one vector node."""
    F = TapeOps(xs[0].tape)
    parts = [x if x.ndim == 1 else F.reshape(x, (x.size,)) for x in xs]
    return parts[0] if len(parts) == 1 else F.concat(parts, axis=0)


def _on_kink(tape: Tape, root: int, wrt: list[int]) -> bool:
    for i in _relevant(tape, root, wrt):
        node = tape.nodes[i]
        if node.op == "relu" and np.any(tape.nodes[node.inputs[0]].value == 0.0):
            return True
    return False


def grad_of_grad(tape: Tape, loss: Var, wrt: Sequence[Var], probe) -> Var:
    """Hessian-vector product of ``loss`` w.r.t. ``wrt`` by double backprop.

    Records the gradient ``g`` on the tape, forms ``g . probe`` and sweeps
    again, so the result ``H @ probe`` stays differentiable.  Exactly two
    reverse sweeps are started.
    """
    if loss.size != 1:
        raise ShapeError("grad_of_grad needs a scalar loss")
    m = sum(w.size for w in wrt)
    probe = np.asarray(probe.value if isinstance(probe, Var) else probe, dtype=np.float64)
    if probe.shape != (m,):
        raise ShapeError(f"probe has shape {probe.shape}, expected ({m},)")
    g = flatten(grad(loss, wrt, create_graph=True))
    s = TapeOps(tape).dot(g, tape.constant(probe))
    hv = flatten(grad(s, wrt, create_graph=True))
    if _on_kink(tape, loss.id, [w.id for w in wrt]):
        warnings.warn("relu evaluated at its kink; second derivative uses subgradient 0", RuntimeWarning)
    return hv
