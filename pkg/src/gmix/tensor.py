"""Dense float64 tensors with tape-ordered reverse-mode differentiation.

Every differentiable op appends a node carrying a global sequence number, so
sorting the reachable nodes by that number reproduces the order in which they
were recorded: a valid topological order.  A graph is consumed by its backward
pass; the saved activations are released and any later use raises
:class:`~gmix.errors.GraphConsumedError`.
"""
from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import GraphConsumedError, ShapeError, ValidationError

_seq = itertools.count()
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


def _collecting() -> bool:
    return getattr(_state, "collect_factors", False)


@contextmanager
def no_grad():
    """Evaluate without recording nodes."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class BackwardCounter:
    """Counts backward passes; used to audit the back-prop budget of each method."""

    def __init__(self):
        self.count = 0
        self._lock = threading.Lock()

    def increment(self):
        with self._lock:
            self.count += 1

    def reset(self):
        with self._lock:
            self.count = 0


backward_counter = BackwardCounter()


class Node:
    __slots__ = ("op", "parents", "backward_fn", "seq", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.consumed = False


class Tensor:
    """A float64 array that can take part in a differentiation graph.

    Leaves are created directly; op results carry a :class:`Node`.  ``grad`` is
    populated on leaves with ``requires_grad=True`` by :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "factors", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node = None
        # (layer input, upstream gradient) captured by `linear` when requested
        self.factors = None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        t = cls.__new__(cls)
        t.data = data
        t.requires_grad = requires_grad
        t.grad = None
        t.node = None
        t.factors = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"tensor of shape {self.shape} is not a scalar")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)
        self.factors = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_as_tensor(other)))

    def __rsub__(self, other):
        return add(_as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis)

    def mean(self):
        return mean(self)

    def backward(self, collect_factors: bool = False):
        backward(self, collect_factors=collect_factors)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, op: str, parents: tuple, backward_fn: Callable) -> Tensor:
    req = _grad_enabled() and any(p.requires_grad for p in parents)
    out = Tensor._wrap(data, req)
    if req:
        for p in parents:
            if p.node is not None and p.node.consumed:
                raise GraphConsumedError(
                    f"input to '{op}' belongs to a graph that was already consumed"
                )
        out.node = Node(op, parents, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    sa, sb = a.shape, b.shape

    def bw(g):
        return _unbroadcast(g, sa), _unbroadcast(g, sb)

    return _record(out, "add", (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    ad, bd = a.data, b.data

    def bw(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _record(out, "mul", (a, b), bw)


def matmul(a, b) -> Tensor:
    """Matrix product of an ``m x k`` and a ``k x n`` tensor."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _record(ad @ bd, "matmul", (a, b), bw)


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` for a batch ``x`` of shape ``(batch, in)``.

    When the backward pass runs with ``collect_factors=True`` the layer input
    and the per-row upstream gradient are stored on ``w.factors`` and
    ``b.factors``; row ``i`` of ``outer(input_i, upstream_i)`` is then the
    gradient of example ``i``'s loss, provided rows never interact.
    """
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {w.shape}")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data

    def bw(g):
        if _collecting():
            w.factors = (xd, g)
            b.factors = g
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.T @ g if w.requires_grad else None
        gb = g.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return _record(xd @ wd + b.data, "linear", (x, w, b), bw)


def segment(flat, start: int, shape: tuple) -> Tensor:
    """Reshaped copy of ``flat[start:start + prod(shape)]`` for a 1-d tensor."""
    flat = _as_tensor(flat)
    if flat.ndim != 1:
        raise ShapeError(f"segment needs a 1-d tensor, got shape {flat.shape}")
    stop = start + int(np.prod(shape))
    if start < 0 or stop > flat.size:
        raise ShapeError(f"segment [{start}:{stop}] outside tensor of length {flat.size}")
    n = flat.size

    def bw(g):
        full = np.zeros(n)
        full[start:stop] = g.reshape(-1)
        return (full,)

    return _record(flat.data[start:stop].reshape(shape).copy(), "segment", (flat,), bw)


def relu(a) -> Tensor:
    """Elementwise ``max(0, a)``; the subgradient at exactly 0 is 0."""
    a = _as_tensor(a)
    mask = a.data > 0

    return _record(np.where(mask, a.data, 0.0), "relu", (a,), lambda g: (g * mask,))


def take_rows(a, rows) -> Tensor:
    """Rows ``a[rows]`` along the leading axis; ``rows`` must be distinct."""
    a = _as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp).reshape(-1)
    if a.ndim < 1:
        raise ShapeError("take_rows needs at least one axis")
    if rows.size and (rows.min() < -a.shape[0] or rows.max() >= a.shape[0]):
        raise ShapeError(f"row index out of range for leading axis of size {a.shape[0]}")
    rows = rows % a.shape[0] if rows.size else rows
    if np.unique(rows).size != rows.size:
        raise ValidationError("take_rows indices must be distinct")
    shape = a.shape

    def bw(g):
        full = np.zeros(shape)
        full[rows] = g
        return (full,)

    return _record(a.data[rows], "take_rows", (a,), bw)


def tensor_sum(a, axis=None) -> Tensor:
    a = _as_tensor(a)
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(a.data.sum(axis=axis)), "sum", (a,), bw)


def mean(a) -> Tensor:
    a = _as_tensor(a)
    n = a.size
    shape = a.shape
    return _record(
        np.asarray(a.data.sum() / n), "mean", (a,),
        lambda g: (np.broadcast_to(g / n, shape).copy(),),
    )


def _check_targets(logits: Tensor, targets: Tensor):
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-d, got shape {logits.shape}")
    if targets.shape != logits.shape:
        raise ShapeError(f"targets shape {targets.shape} != logits shape {logits.shape}")


def softmax_cross_entropy(logits, targets) -> Tensor:
    """Per-example cross-entropy between ``softmax(logits)`` and soft targets.

    Returns a tensor of shape ``(batch,)``.  Target rows must sum to one
    within 1e-9.  The row maximum is subtracted before exponentiation.
    """
    logits, targets = _as_tensor(logits), _as_tensor(targets)
    _check_targets(logits, targets)
    if logits.shape[1] < 2:
        raise ValidationError("softmax cross-entropy needs at least 2 classes")
    t = targets.data
    row_sums = t.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums - 1.0) > 1e-9)
    if bad.size:
        raise ValidationError(
            f"target row {int(bad[0])} sums to {row_sums[bad[0]]!r}, expected 1"
        )
    z = logits.data
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_norm
    losses = -(t * log_p).sum(axis=1)

    def bw(g):
        gz = gt = None
        if logits.requires_grad:
            p = np.exp(log_p)
            gz = g[:, None] * (p * row_sums[:, None] - t)
        if targets.requires_grad:
            gt = -g[:, None] * log_p
        return gz, gt

    return _record(losses, "softmax_cross_entropy", (logits, targets), bw)


def squared_error(outputs, targets) -> Tensor:
    """Per-example ``0.5 * ||outputs - targets||^2``; shape ``(batch,)``."""
    outputs, targets = _as_tensor(outputs), _as_tensor(targets)
    _check_targets(outputs, targets)
    diff = outputs.data - targets.data

    def bw(g):
        return g[:, None] * diff, -g[:, None] * diff

    return _record(0.5 * (diff * diff).sum(axis=1), "squared_error", (outputs, targets), bw)


# ---------------------------------------------------------------------------
# graph traversal


class Graph:
    """Nodes reachable from an output, in recording order."""

    def __init__(self, tensors: list):
        self.tensors = tensors

    @classmethod
    def from_output(cls, out: Tensor) -> "Graph":
        seen = set()
        found = []
        stack = [out]
        while stack:
            t = stack.pop()
            if t.node is None or id(t) in seen:
                continue
            seen.add(id(t))
            found.append(t)
            stack.extend(t.node.parents)
        found.sort(key=lambda t: t.node.seq)
        return cls(found)

    @property
    def nodes(self) -> list:
        return [t.node for t in self.tensors]

    def __len__(self):
        return len(self.tensors)


def backward(loss: Tensor, collect_factors: bool = False) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every reachable leaf.

    Raises ShapeError for a non-scalar loss and GraphConsumedError when the
    graph has already been through a backward pass.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        if not loss.requires_grad:
            raise ValidationError("loss does not depend on any tensor requiring grad")
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        backward_counter.increment()
        return
    if loss.node.consumed:
        raise GraphConsumedError("backward called twice on the same graph")

    graph = Graph.from_output(loss)
    grads = {id(loss): np.ones_like(loss.data)}
    prev = _collecting()
    _state.collect_factors = collect_factors
    try:
        for t in reversed(graph.tensors):
            g = grads.pop(id(t), None)
            node = t.node
            if g is not None:
                for p, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    if p.node is None:
                        p.grad = pg.copy() if p.grad is None else p.grad + pg
                    elif id(p) in grads:
                        grads[id(p)] = grads[id(p)] + pg
                    else:
                        grads[id(p)] = pg
            node.consumed = True
            node.backward_fn = None
            node.parents = ()
    finally:
        _state.collect_factors = prev
    backward_counter.increment()


def grad_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Largest relative gap between the analytic gradient and a central difference.

    ``f`` maps a 1-d tensor to a scalar tensor.  For each checked coordinate
    the error is ``|a - n| / (|a| + |n| + 1e-12)``.
    """
    if h <= 0:
        raise ValidationError("finite-difference step must be positive")
    p = np.array(point, dtype=np.float64).reshape(-1)
    x = Tensor(p, requires_grad=True)
    out = f(x)
    backward(out)
    analytic = x.grad if x.grad is not None else np.zeros_like(p)
    idx: Sequence[int] = range(p.size) if coords is None else list(coords)
    worst = 0.0
    with no_grad():
        for i in idx:
            up = p.copy()
            up[i] += h
            down = p.copy()
            down[i] -= h
            numeric = (f(Tensor(up)).item() - f(Tensor(down)).item()) / (2 * h)
            a = analytic[i]
            err = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, err)
    return worst
