"""Reverse-mode automatic differentiation over dense float64 arrays.

The engine is deliberately small: an explicit computation record (``Tape``)
is opened per training step, forward ops append nodes to it, and
``backward`` replays the record once in reverse.  There is no global graph
and no implicit state besides the thread-local "currently recording" slot.

Higher-order derivatives need no special machinery.  Every VJP is written
in terms of the public ops themselves, so running ``backward_retaining``
on a record opened with ``retain=True`` appends the backward pass to the
same record; the returned gradients are then ordinary recorded values and
can be differentiated again.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import expit


class ShapeMismatchError(ValueError):
    """Operands do not conform for the requested operation."""

    def __init__(self, op: str, *shapes):
        self.op = op
        self.shapes = tuple(shapes)
        detail = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shapes {detail} do not conform")


class RecordError(RuntimeError):
    """Misuse of a computation record (empty backward, foreign values, ...)."""


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


class _using_tape:
    """Temporarily make `tape` (or None) the recording target."""

    def __init__(self, tape: Optional["Tape"]):
        self.tape = tape

    def __enter__(self):
        self.prev = _active_tape()
        _state.tape = self.tape
        return self

    def __exit__(self, *exc):
        _state.tape = self.prev
        return False


class Node:
    """One recorded operation: parents plus a vector-Jacobian closure."""

    __slots__ = ("tape", "op", "parents", "vjp")

    def __init__(self, tape, op, parents, vjp):
        self.tape = tape
        self.op = op
        self.parents = parents  # tuple[Node | None], aligned with the op inputs
        self.vjp = vjp  # None for leaves


class Tensor:
    """Dense float64 value, optionally attached to a node of some record.

    Tensors are immutable by convention: ops return fresh Tensors and the
    training loop never writes into ``.data`` of a live one.
    """

    __slots__ = ("data", "node")

    def __init__(self, data, node: Optional[Node] = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.node = node

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = "" if self.node is None else f" op={self.node.op}"
        return f"Tensor(shape={self.data.shape}{tag})"

    # operator sugar; all dispatch to the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scalar_mul(-1.0, self)


class Tape:
    """Explicit computation record, opened per step and discarded after.

    Nodes are appended in execution order, which is already a topological
    order, so backward is a single reverse sweep.  ``retain=True`` allows
    ``backward_retaining`` to extend the record with the backward pass.
    """

    def __init__(self, retain: bool = False):
        self.retain = retain
        self.nodes: list[Node] = []
        self._leaves: list[Tensor] = []

    def __enter__(self):
        self._ctx = _using_tape(self)
        self._ctx.__enter__()
        return self

    def __exit__(self, *exc):
        return self._ctx.__exit__(*exc)

    def leaf(self, value) -> Tensor:
        """Register a differentiation root holding `value` on this record."""
        data = value.data if isinstance(value, Tensor) else value
        node = Node(self, "leaf", (), None)
        self.nodes.append(node)
        t = Tensor(data, node)
        self._leaves.append(t)
        return t

    def leaves(self) -> tuple[Tensor, ...]:
        return tuple(self._leaves)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, out_data, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    tape = _active_tape()
    if tape is None:
        return Tensor(out_data)
    parents = []
    tracked = False
    for t in inputs:
        node = t.node
        if node is not None and node.tape is not tape:
            raise RecordError(
                f"{op}: input was recorded on a different record; "
                "records must not be mixed"
            )
        parents.append(node)
        tracked = tracked or node is not None
    if not tracked:
        return Tensor(out_data)
    node = Node(tape, op, tuple(parents), vjp)
    tape.nodes.append(node)
    return Tensor(out_data, node)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim == 0 or b.ndim == 0 or a.ndim > 2 or b.ndim > 2:
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    if a.shape[-1] != (b.shape[0] if b.ndim >= 1 else -1):
        raise ShapeMismatchError("matmul", a.shape, b.shape)
    out = a.data @ b.data

    def vjp(g: Tensor):
        if a.ndim == 2 and b.ndim == 2:
            return matmul(g, transpose(b)), matmul(transpose(a), g)
        if a.ndim == 1 and b.ndim == 2:
            # (k,) @ (k, n) -> (n,)
            return matmul(b, g), matmul(reshape(a, (a.shape[0], 1)), reshape(g, (1, g.shape[0])))
        if a.ndim == 2 and b.ndim == 1:
            # (m, k) @ (k,) -> (m,)
            return matmul(reshape(g, (g.shape[0], 1)), reshape(b, (1, b.shape[0]))), matmul(transpose(a), g)
        # (k,) @ (k,) -> scalar dot product
        return mul(g, b), mul(g, a)

    return _record("matmul", out, (a, b), vjp)


def _binary(op: str, a, b, fwd, vjp_factory) -> Tensor:
    """Elementwise binary op with numpy broadcasting.

    Broadcasting is made explicit: both operands are materialized to the
    common shape first, so the elementwise VJPs never have to un-broadcast.
    """
    a, b = _lift(a), _lift(b)
    try:
        shape = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatchError(op, a.shape, b.shape) from None
    if a.shape != shape:
        a = broadcast_to(a, shape)
    if b.shape != shape:
        b = broadcast_to(b, shape)
    out = fwd(a.data, b.data)
    result = _record(op, out, (a, b), None)
    if result.node is not None:
        result.node.vjp = vjp_factory(a, b, result)
    return result


def add(a, b) -> Tensor:
    return _binary("add", a, b, np.add, lambda a, b, o: lambda g: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, np.subtract, lambda a, b, o: lambda g: (g, neg(g)))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, np.multiply,
                   lambda a, b, o: lambda g: (mul(g, b), mul(g, a)))


def div(a, b) -> Tensor:
    def fwd(x, y):
        if np.any(y == 0.0):
            raise ZeroDivisionError("div: zero denominator")
        return x / y

    def vjp_factory(a, b, out):
        def vjp(g):
            ga = div(g, b)
            return ga, neg(mul(ga, out))

        return vjp

    return _binary("div", a, b, fwd, vjp_factory)


def scalar_mul(c: float, x) -> Tensor:
    x = _lift(x)
    c = float(c)
    return _record("scalar_mul", c * x.data, (x,), lambda g: (scalar_mul(c, g),))


def neg(x) -> Tensor:
    return scalar_mul(-1.0, x)


def square(x) -> Tensor:
    x = _lift(x)
    return _record("square", x.data * x.data, (x,),
                   lambda g: (mul(g, scalar_mul(2.0, x)),))


def absval(x) -> Tensor:
    x = _lift(x)
    sign = Tensor(np.sign(x.data))  # subgradient 0 at exactly 0
    return _record("abs", np.abs(x.data), (x,), lambda g: (mul(g, sign),))


def relu(x) -> Tensor:
    """Hinge [x]+ with the strict-inequality subgradient (0 at exactly 0)."""
    x = _lift(x)
    mask = Tensor((x.data > 0.0).astype(np.float64))
    return _record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (mul(g, mask),))


hinge = relu


def sigmoid(x) -> Tensor:
    x = _lift(x)
    out = _record("sigmoid", expit(x.data), (x,), None)
    if out.node is not None:
        out.node.vjp = lambda g: (mul(g, mul(out, sub(1.0, out))),)
    return out


def log(x) -> Tensor:
    x = _lift(x)
    if np.any(x.data <= 0.0):
        raise ValueError("log: requires strictly positive inputs")
    return _record("log", np.log(x.data), (x,), lambda g: (div(g, x),))


def clamp(x, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where lo < x < hi."""
    x = _lift(x)
    if not lo < hi:
        raise ValueError(f"clamp: empty interval [{lo}, {hi}]")
    if np.any(np.isnan(x.data)):
        raise ValueError("clamp: NaN input")
    mask = Tensor(((x.data > lo) & (x.data < hi)).astype(np.float64))
    return _record("clamp", np.clip(x.data, lo, hi), (x,), lambda g: (mul(g, mask),))


def l2norm(x) -> Tensor:
    """Euclidean norm over the last axis; (..., d) -> (...)."""
    x = _lift(x)
    if x.ndim == 0:
        raise ShapeMismatchError("l2norm", x.shape)
    data = np.sqrt(np.sum(x.data * x.data, axis=-1))
    out = _record("l2norm", data, (x,), None)
    if out.node is not None:
        def vjp(g):
            ratio = div(g, out)  # (...,)
            return (mul(x, reshape(ratio, ratio.shape + (1,))),)

        out.node.vjp = vjp
    return out


def row_max(x) -> tuple[Tensor, np.ndarray]:
    """Per-row maximum of a 2D tensor; ties resolve to the lowest index.

    Returns (values, argmax indices); the indices are plain ints, not part
    of the record.
    """
    x = _lift(x)
    if x.ndim != 2 or x.shape[1] == 0:
        raise ShapeMismatchError("row_max", x.shape)
    idx = np.argmax(x.data, axis=1)
    rows = np.arange(x.shape[0])
    onehot = np.zeros_like(x.data)
    onehot[rows, idx] = 1.0
    mask = Tensor(onehot)
    out = _record("row_max", x.data[rows, idx], (x,),
                  lambda g: (mul(mask, reshape(g, (g.shape[0], 1))),))
    return out, idx


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axis, x.ndim)
    in_shape = x.shape
    kept = tuple(1 if i in axes else d for i, d in enumerate(in_shape))
    data = np.sum(x.data, axis=axes if axes else None, keepdims=keepdims)

    def vjp(g):
        gk = g if keepdims else reshape(g, kept)
        return (broadcast_to(gk, in_shape),)

    return _record("sum", data, (x,), vjp)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _lift(x)
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeMismatchError("mean", x.shape)
    return scalar_mul(1.0 / count, reduce_sum(x, axis=axis, keepdims=keepdims))


def broadcast_to(x, shape) -> Tensor:
    x = _lift(x)
    shape = tuple(shape)
    try:
        data = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeMismatchError("broadcast_to", x.shape, shape) from None
    in_shape = x.shape

    def vjp(g):
        extra = len(shape) - len(in_shape)
        axes = tuple(range(extra)) + tuple(
            i + extra for i, d in enumerate(in_shape) if d == 1 and shape[i + extra] != 1
        )
        out = reduce_sum(g, axis=axes) if axes else g
        return (out if out.shape == in_shape else reshape(out, in_shape),)

    return _record("broadcast_to", data, (x,), vjp)


def reshape(x, shape) -> Tensor:
    x = _lift(x)
    shape = tuple(int(s) for s in shape)
    if x.size != int(np.prod(shape, dtype=np.int64)):
        raise ShapeMismatchError("reshape", x.shape, shape)
    in_shape = x.shape
    return _record("reshape", x.data.reshape(shape), (x,),
                   lambda g: (reshape(g, in_shape),))


def transpose(x) -> Tensor:
    x = _lift(x)
    if x.ndim != 2:
        raise ShapeMismatchError("transpose", x.shape)
    return _record("transpose", x.data.T.copy(), (x,), lambda g: (transpose(g),))


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeMismatchError("concat", ())
    ndim = parts[0].ndim
    if ndim == 0:
        raise ShapeMismatchError("concat", parts[0].shape)
    axis = axis % ndim
    base = list(parts[0].shape)
    for p in parts[1:]:
        if p.ndim != ndim:
            raise ShapeMismatchError("concat", parts[0].shape, p.shape)
        other = list(p.shape)
        other[axis] = base[axis]
        if other != base:
            raise ShapeMismatchError("concat", parts[0].shape, p.shape)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(narrow(g, axis, int(offsets[i]), sizes[i]) for i in range(len(parts)))

    return _record("concat", np.concatenate([p.data for p in parts], axis=axis),
                   tuple(parts), vjp)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` elements along `axis`, starting at `start`."""
    x = _lift(x)
    if x.ndim == 0:
        raise ShapeMismatchError("narrow", x.shape)
    axis = axis % x.ndim
    dim = x.shape[axis]
    if start < 0 or length < 0 or start + length > dim:
        raise ShapeMismatchError("narrow", x.shape, (start, length))
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, start + length)
    after = dim - start - length

    def vjp(g):
        parts = []
        if start:
            shape = list(x.shape)
            shape[axis] = start
            parts.append(Tensor(np.zeros(shape)))
        parts.append(g)
        if after:
            shape = list(x.shape)
            shape[axis] = after
            parts.append(Tensor(np.zeros(shape)))
        return (concat(parts, axis=axis) if len(parts) > 1 else g,)

    return _record("narrow", x.data[tuple(index)].copy(), (x,), vjp)


_PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scalar_mul": scalar_mul,
    "neg": neg,
    "square": square,
    "abs": absval,
    "relu": relu,
    "hinge": hinge,
    "sigmoid": sigmoid,
    "log": log,
    "clamp": clamp,
    "l2norm": l2norm,
    "row_max": row_max,
    "sum": reduce_sum,
    "mean": reduce_mean,
    "broadcast_to": broadcast_to,
    "reshape": reshape,
    "transpose": transpose,
    "concat": concat,
    "narrow": narrow,
}


def primitive_forward(op_kind: str, *inputs, **kwargs):
    """Apply a primitive by name; unknown kinds are rejected."""
    try:
        fn = _PRIMITIVES[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive: {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ---------------------------------------------------------------------------
# backward


def _backprop(record: Tape, output: Tensor) -> dict[Tensor, Tensor]:
    if not record.nodes:
        raise RecordError("backward on an empty record")
    if output.node is None or output.node.tape is not record:
        raise RecordError("backward: output was not recorded on this record")
    if output.data.size != 1:
        raise RecordError(
            f"backward requires a scalar output, got shape {output.shape}"
        )
    grads: dict[Node, Tensor] = {output.node: Tensor(np.ones_like(output.data))}
    # Snapshot the length: VJPs may append nodes (retaining mode); those
    # belong to future backward passes, not this one.
    for i in range(len(record.nodes) - 1, -1, -1):
        node = record.nodes[i]
        g = grads.get(node)
        if g is None or node.vjp is None:
            continue
        del grads[node]
        for parent, pg in zip(node.parents, node.vjp(g)):
            if parent is None or pg is None:
                continue
            acc = grads.get(parent)
            grads[parent] = pg if acc is None else add(acc, pg)
    out: dict[Tensor, Tensor] = {}
    for leaf in record.leaves():
        g = grads.get(leaf.node)
        out[leaf] = Tensor(np.zeros_like(leaf.data)) if g is None else g
    return out


def backward(record: Tape, output: Tensor) -> dict[Tensor, Tensor]:
    """Gradients of a scalar `output` w.r.t. every leaf of `record`.

    Recording is suspended for the sweep; returned gradients are plain
    values.  Leaves the output does not depend on map to zeros.
    """
    with _using_tape(None):
        return _backprop(record, output)


def backward_retaining(record: Tape, output: Tensor) -> dict[Tensor, Tensor]:
    """Like `backward`, but the sweep itself is recorded onto `record`.

    The record must have been opened with ``retain=True``.  Returned
    gradients are recorded values, so a later backward pass over the same
    record differentiates through them (gradients of gradients).
    """
    if not record.retain:
        raise RecordError("backward_retaining requires a record opened with retain=True")
    with _using_tape(record):
        return _backprop(record, output)
