"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Every op records its inputs and a backward closure on the output tensor.  The
graph is rebuilt on each forward pass (define-by-run); :func:`backward`
collects the records reachable from a scalar root, orders them by creation
index (the tape order), and replays their backward rules in reverse.

Broadcasting is deliberately limited to scalar <-> tensor and equal shapes.
Row or column broadcasting is expressed through ``matmul`` with a ones vector
(see :func:`broadcast_rows`).
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "DimensionError",
    "NumericDomainError",
    "UsageError",
    "tensor",
    "constant",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "abs_",
    "pow_",
    "sigmoid",
    "tanh",
    "relu",
    "exp",
    "log",
    "clamp",
    "elementwise",
    "row_softmax",
    "logsumexp",
    "gather_rows",
    "transpose",
    "sum_",
    "mean",
    "slice_rows",
    "slice_cols",
    "concat_rows",
    "concat_cols",
    "reshape",
    "broadcast_rows",
    "backward",
    "no_grad",
    "is_grad_enabled",
    "numeric_grad",
    "relative_error",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericDomainError(ValueError):
    """An input lies outside the mathematical domain of an op."""


class UsageError(RuntimeError):
    """An API was called in a way its contract forbids."""


_counter = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextmanager
def no_grad():
    """Suspend graph recording (inference, weight updates)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array plus, when it takes part in a graph, its tape record."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self.op})"

    # operator sugar
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

    def __pow__(self, exponent):
        return pow_(self, exponent)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def constant(data) -> Tensor:
    return Tensor(data)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    """Wrap ``out`` and, if any parent needs a gradient, register it on the tape."""
    t = Tensor(out)
    t.op = op
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t._parents = parents
        t._backward = backward_fn
        t.node_id = next(_counter)
    return t


def make_op(out: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Public hook for ops defined outside this module (e.g. the CRF partition)."""
    return _record(np.asarray(out, dtype=np.float64), tuple(parents), backward_fn, op)


# ---------------------------------------------------------------------------
# helpers for limited broadcasting


def _is_scalar(a: np.ndarray) -> bool:
    return a.size == 1


def _broadcast_shape(a: np.ndarray, b: np.ndarray, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if _is_scalar(b):
        return a.shape
    if _is_scalar(a):
        return b.shape
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.full(shape, grad.sum())


# ---------------------------------------------------------------------------
# elementwise ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.data, b.data, "add")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(-g, sb)

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(ad * bd, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape(a.data, b.data, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise NumericDomainError("div: division by zero")

    def bw(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)

    return _record(ad / bd, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a) -> Tensor:
    """Absolute value; the backward rule uses subgradient 0 at exactly 0."""
    a = _as_tensor(a)
    s = np.sign(a.data)
    return _record(np.abs(a.data), (a,), lambda g: (g * s,), "abs")


def pow_(a, exponent: float) -> Tensor:
    a = _as_tensor(a)
    exponent = float(exponent)
    x = a.data
    if not float(exponent).is_integer() and np.any(x < 0):
        raise NumericDomainError(f"pow: negative base with non-integer exponent {exponent}")
    if exponent < 0 and np.any(x == 0):
        raise NumericDomainError(f"pow: zero base with negative exponent {exponent}")
    out = np.power(x, exponent)

    def bw(g):
        if exponent == 0.0:
            return (np.zeros_like(x),)
        return (g * exponent * np.power(x, exponent - 1.0),)

    return _record(out, (a,), bw, "pow")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    m = (a.data > 0).astype(np.float64)
    return _record(a.data * m, (a,), lambda g: (g * m,), "relu")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    if np.any(x <= 0):
        raise NumericDomainError("log: non-positive input")
    return _record(np.log(x), (a,), lambda g: (g / x,), "log")


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip into [lo, hi]; gradient passes only where the input was inside."""
    a = _as_tensor(a)
    x = a.data
    inside = ((x >= lo) & (x <= hi)).astype(np.float64)
    return _record(np.clip(x, lo, hi), (a,), lambda g: (g * inside,), "clamp")


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "abs": abs_,
    "pow": pow_,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "exp": exp,
    "log": log,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``elementwise("mul", a, b)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise UsageError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not agree")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), bw, "matmul")


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got shape {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def sum_(a) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape
    return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a) -> Tensor:
    a = _as_tensor(a)
    shape, n = a.shape, a.size
    if n == 0:
        raise UsageError("mean of an empty tensor")
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def row_softmax(x, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over each row of a matrix, max-subtracted.

    ``mask`` (bool, same shape) marks admissible entries; masked entries get
    probability exactly 0.  Every row must keep at least one entry.
    """
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"row_softmax: expected a matrix, got shape {x.shape}")
    z = x.data
    if mask is not None:
        if mask.shape != z.shape:
            raise DimensionError(f"row_softmax: mask shape {mask.shape} != input {z.shape}")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _record(out, (x,), bw, "row_softmax")


def logsumexp(x, axis: int | None = None) -> Tensor:
    """log sum exp, max-subtracted.

    ``axis=None`` reduces everything to a scalar; ``axis=1`` reduces each row
    of a matrix to an ``m x 1`` column.
    """
    x = _as_tensor(x)
    d = x.data
    if d.size == 0:
        raise UsageError("logsumexp of an empty tensor")
    if axis is None:
        m = d.max()
        s = np.exp(d - m)
        tot = s.sum()
        w = s / tot
        return _record(np.asarray(m + np.log(tot)), (x,), lambda g: (float(g) * w,), "logsumexp")
    if axis != 1 or d.ndim != 2:
        raise UsageError("logsumexp supports axis=None or axis=1 on a matrix")
    m = d.max(axis=1, keepdims=True)
    s = np.exp(d - m)
    tot = s.sum(axis=1, keepdims=True)
    w = s / tot
    return _record(m + np.log(tot), (x,), lambda g: (g * w,), "logsumexp_rows")


def gather_rows(table, ids: Iterable[int]) -> Tensor:
    """Row lookup; the backward rule scatter-adds into the table gradient."""
    table = _as_tensor(table)
    if table.ndim != 2:
        raise DimensionError(f"gather_rows: expected a matrix table, got shape {table.shape}")
    idx = np.asarray(list(ids) if not isinstance(ids, np.ndarray) else ids, dtype=np.int64)
    v = table.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= v):
        bad = idx[(idx < 0) | (idx >= v)][0]
        raise IndexError(f"gather_rows: id {int(bad)} out of range for table with {v} rows")
    shape = table.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _record(table.data[idx].reshape(idx.size, shape[1]), (table,), bw, "gather_rows")


def slice_rows(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[start:stop] = g
        return (out,)

    return _record(a.data[start:stop].copy(), (a,), bw, "slice_rows")


def slice_cols(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"slice_cols: expected a matrix, got shape {a.shape}")
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        out[:, start:stop] = g
        return (out,)

    return _record(a.data[:, start:stop].copy(), (a,), bw, "slice_cols")


def _concat(parts: Sequence[Tensor], axis: int, op: str) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise UsageError(f"{op}: nothing to concatenate")
    if any(p.ndim != 2 for p in parts):
        raise DimensionError(f"{op}: all parts must be matrices")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"{op}: mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])

    def bw(g):
        if axis == 0:
            return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), bw, op)


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 0, "concat_rows")


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    return _concat(parts, 1, "concat_cols")


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    old = a.shape
    return _record(a.data.reshape(shape).copy(), (a,), lambda g: (g.reshape(old),), "reshape")


def broadcast_rows(v, n: int) -> Tensor:
    """Repeat a ``1 x d`` row ``n`` times as ``ones(n,1) @ v``."""
    v = _as_tensor(v)
    if v.ndim == 1:
        v = reshape(v, (1, v.shape[0]))
    return matmul(Tensor(np.ones((n, 1))), v)


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Records reachable from a root, sorted into creation (tape) order."""

    def __init__(self, records: list[Tensor]):
        self.records = records

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        seen: set[int] = set()
        records: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._backward is None or id(t) in seen:
                continue
            seen.add(id(t))
            records.append(t)
            stack.extend(t._parents)
        records.sort(key=lambda t: t.node_id)
        return cls(records)

    def __len__(self) -> int:
        return len(self.records)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf.

    Gradients add onto any existing ``.grad``; call ``zero_grad`` between steps.
    """
    if root.size != 1:
        raise UsageError(f"backward: root must be a scalar, got shape {root.shape}")
    if not root.requires_grad:
        return
    tape = Tape.from_root(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec), None)
        if g is None:
            continue
        for parent, pg in zip(rec._parents, rec._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._backward is None:
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
            else:
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg
    if root._backward is None and root.requires_grad:
        root.grad = np.ones(root.shape) if root.grad is None else root.grad + 1.0


# ---------------------------------------------------------------------------
# finite differences


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``fn()`` w.r.t. ``x.data`` (in place)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = fn().item()
            flat[i] = old - h
            fm = fn().item()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - n|| / max(||a||, ||n||, floor)``."""
    diff = np.linalg.norm(np.asarray(analytic) - np.asarray(numeric))
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(diff / scale)
