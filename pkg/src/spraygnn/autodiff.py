"""Dense float64 tensors with a recording tape for reverse-mode gradients.

Operations record themselves on the active :class:`Tape` (entered with a
``with`` block) whenever at least one input requires a gradient. The tape
is a flat list in creation order, which is already a valid topological
order, so :func:`backward` is a single reverse sweep.
"""

from __future__ import annotations

import itertools
from typing import Callable, Sequence

import numpy as np
from scipy import sparse

from .errors import DetachedTensor, NotScalar, SegmentOutOfRange, ShapeMismatch

_tape_ids = itertools.count(1)
_active: list["Tape"] = []


class Tensor:
    """Row-major float64 array, optionally attached to a tape."""

    __slots__ = ("values", "requires_grad", "tape_id", "name", "_parents", "_vjp")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        self.values = np.asarray(values, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


class Tape:
    """Records differentiable operations in execution order."""

    def __init__(self):
        self.id = next(_tape_ids)
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _active.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)


def parameter(values, name: str | None = None) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def constant(values) -> Tensor:
    return values if isinstance(values, Tensor) else Tensor(values)


def _record(out_values: np.ndarray, parents: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(out_values)
    if _active and any(p.requires_grad for p in parents):
        tape = _active[-1]
        out.requires_grad = True
        out.tape_id = tape.id
        out._parents = tuple(parents)
        out._vjp = vjp
        tape.nodes.append(out)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _scatter_matrix(index: np.ndarray, n: int) -> sparse.csr_matrix:
    # (n x len(index)) 0/1 matrix; CSR products sum each row in a fixed order
    cols = np.arange(index.size)
    return sparse.csr_matrix((np.ones(index.size), (index, cols)), shape=(n, index.size))


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{op}: cannot broadcast {a.shape} with {b.shape}") from None


# ---------------------------------------------------------------------------
# forward ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _record(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def affine(x: Tensor, w: Tensor, b: Tensor, relu_out: bool = False) -> Tensor:
    """``x @ w + b``, optionally followed by ReLU, as one taped node.

    Fusing keeps a single (rows, width) array per layer alive on the tape
    instead of three, which is what bounds memory for the full-size model.
    """
    x, w, b = constant(x), constant(w), constant(b)
    if x.values.ndim != 2 or w.values.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeMismatch(f"affine: {x.shape} @ {w.shape} + {b.shape}")
    xv, wv = x.values, w.values
    out = xv @ wv
    out += b.values
    if relu_out:
        np.maximum(out, 0.0, out=out)

    def vjp(g):
        if relu_out:
            g = g * (out > 0.0)
        return g @ wv.T, xv.T @ g, g.sum(axis=0)

    return _record(out, (x, w, b), vjp)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _record(
        a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _record(
        a.values - b.values, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = constant(a), constant(b)
    _check_broadcast(a, b, "mul")
    av, bv = a.values, b.values
    return _record(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(a: Tensor, factor: float) -> Tensor:
    a = constant(a)
    return _record(a.values * factor, (a,), lambda g: (g * factor,))


def relu(a: Tensor) -> Tensor:
    a = constant(a)
    # subgradient at exactly zero is 0
    mask = a.values > 0.0
    return _record(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def square(a: Tensor) -> Tensor:
    a = constant(a)
    av = a.values
    return _record(av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a: Tensor) -> Tensor:
    a = constant(a)
    out = np.sqrt(a.values)

    def vjp(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0.0, 0.5 / out, 0.0)
        return (g * d,)

    return _record(out, (a,), vjp)


def gather_rows(a: Tensor, index) -> Tensor:
    a = constant(a)
    index = np.asarray(index, dtype=np.int64)
    n = a.shape[0]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise SegmentOutOfRange(f"gather_rows: index outside [0, {n})")
    values = a.values

    def vjp(g):
        return (_scatter_matrix(index, n) @ g.reshape(index.size, -1)).reshape(values.shape),

    return _record(values[index], (a,), vjp)


def segment_sum(a: Tensor, segments, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets keyed by ``segments``."""
    a = constant(a)
    segments = np.asarray(segments, dtype=np.int64)
    if segments.shape != (a.shape[0],):
        raise ShapeMismatch(f"segment_sum: {segments.shape} ids for {a.shape[0]} rows")
    if segments.size and (segments.min() < 0 or segments.max() >= num_segments):
        raise SegmentOutOfRange(f"segment_sum: id outside [0, {num_segments})")
    flat = a.values.reshape(a.shape[0], -1)
    out = (_scatter_matrix(segments, num_segments) @ flat).reshape((num_segments,) + a.shape[1:])
    return _record(out, (a,), lambda g: (g[segments],))


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    parts = [constant(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1 or any(p.values.ndim != 2 for p in parts):
        raise ShapeMismatch(f"concat_cols: {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def vjp(g):
        return tuple(g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:]))

    return _record(np.concatenate([p.values for p in parts], axis=1), parts, vjp)


def reduce_sum(a: Tensor, axis: int | None = None) -> Tensor:
    a = constant(a)
    shape = a.shape

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(np.asarray(a.values.sum(axis=axis)), (a,), vjp)


def reduce_mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = constant(a)
    count = a.size if axis is None else a.shape[axis]
    return scale(reduce_sum(a, axis), 1.0 / count)


def weighted_sumsq(a: Tensor, weights) -> Tensor:
    """Scalar sum_i w_i * ||a_i||^2 over the rows of ``a``."""
    a = constant(a)
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (a.shape[0],):
        raise ShapeMismatch(f"weighted_sumsq: weights {w.shape} for rows {a.shape}")
    av = a.values.reshape(a.shape[0], -1)
    total = float(np.dot(w, (av * av).sum(axis=1)))
    shape = a.shape

    def vjp(g):
        return ((2.0 * g * w[:, None] * av).reshape(shape),)

    return _record(np.asarray(total), (a,), vjp)


def max_reduce(a: Tensor) -> Tensor:
    """Maximum over all entries; the gradient goes to the first argmax only."""
    a = constant(a)
    flat = a.values.reshape(-1)
    if flat.size == 0:
        raise ShapeMismatch("max_reduce: empty tensor")
    k = int(np.argmax(flat))
    shape = a.shape

    def vjp(g):
        out = np.zeros(flat.size)
        out[k] = g
        return (out.reshape(shape),)

    return _record(np.asarray(flat[k]), (a,), vjp)


def row_norm(a: Tensor) -> Tensor:
    """Euclidean norm of every row."""
    return sqrt(reduce_sum(square(a), axis=1))


# ---------------------------------------------------------------------------
# reverse sweep


def backward(tape: Tape, loss: Tensor, params: Sequence[Tensor] | None = None) -> dict[int, np.ndarray]:
    """Propagate d(loss) back through ``tape``.

    Returns a mapping ``id(tensor) -> gradient`` for every leaf tensor that
    requires a gradient and was reached. If ``params`` is given, every one of
    them gets an entry (zeros when unreached).
    """
    if loss.size != 1:
        raise NotScalar(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.tape_id != tape.id:
        raise DetachedTensor("loss was not recorded on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    if params is not None:
        return {id(p): grads.get(id(p), np.zeros(p.shape)) for p in params}
    return grads


# ---------------------------------------------------------------------------
# optimizer


class AdamState:
    """Bias-corrected Adam moments for a fixed list of parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros(p.shape) for p in params]
        self.v = [np.zeros(p.shape) for p in params]
        self.step = 0


def adam_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: AdamState) -> None:
    """Apply one Adam update to ``params`` in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeMismatch("adam_step: parameter/gradient/state counts differ")
    for p, g, m in zip(params, grads, state.m):
        if p.shape != np.shape(g) or p.shape != m.shape:
            raise ShapeMismatch(f"adam_step: {p.shape} vs grad {np.shape(g)}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.values = p.values - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
