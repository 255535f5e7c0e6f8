"""
Minimal tensor algebra with tape-based reverse-mode differentiation.

Tensors wrap row-major numpy arrays. Operations are recorded only while a
:class:`Tape` is active and at least one input requires a gradient, so
decoding and other inference paths run tape-free at numpy speed.

    >>> with Tape() as tape:
    ...     x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    ...     loss = sum_all(mul(x, x))
    >>> backward(loss, tape)
    >>> x.grad
    array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np

NEG_INF = -1e9

class _State(threading.local):
    tape = None


_local = _State()


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id: Optional[int] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of primitive operations for one backward pass.

    Used as a context manager; tapes do not nest across threads.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._prev: Optional[Tape] = None

    def __enter__(self) -> "Tape":
        self._prev = _local.tape
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = self._prev
        self._prev = None

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        for rec in self.records:
            rec.output.node_id = None
        self.records = []


def active_tape() -> Optional[Tape]:
    return _local.tape


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def record(out_data: np.ndarray, inputs: Sequence[Tensor],
           backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> Tensor:
    """Wrap ``out_data`` and register its local gradient rule on the active tape.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    """
    tape = _local.tape
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.requires_grad = needs
    out.node_id = None
    out.name = None
    if needs:
        out.node_id = len(tape.records)
        tape.records.append(_Record(tuple(inputs), out, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(*shapes) -> tuple:
    try:
        return np.broadcast_shapes(*shapes)
    except ValueError:
        raise DimensionError(f"incompatible shapes {' vs '.join(map(str, shapes))}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        _broadcast_shape(sa, sb)
    return record(a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        _broadcast_shape(a.shape, b.shape)
    return record(a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if sa != sb:
        _broadcast_shape(sa, sb)

    def bw(g):
        ga = _unbroadcast(g * b.data, sa) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, sb) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    return record(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,))


def sub_from_one(a: Tensor) -> Tensor:
    return record(1 - a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    # overflow-free form of 1 / (1 + exp(-x))
    out = 0.5 * (1 + np.tanh(0.5 * a.data))
    return record(out, (a,), lambda g: (g * out * (1 - out),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return record(out, (a,), lambda g: (g * (1 - out * out),))


_ELEMENTWISE = {
    "sigmoid": sigmoid,
    "tanh": tanh,
    "add": add,
    "mul": mul,
    "sub-from-one": sub_from_one,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by name: ``sigmoid``, ``tanh``, ``add``, ``mul``, ``sub-from-one``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a`` of shape (..., k) and 2-D ``b`` of shape (k, n)."""
    if b.data.ndim != 2 or a.data.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return record(np.dot(a.data, b.data), (a, b), bw)


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine layer ``x @ w.T + b`` with ``w`` stored as [out x in]."""
    wd = w.data
    if wd.ndim != 2 or x.data.shape[-1] != wd.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape} vs weight {w.shape}")
    out = np.dot(x.data, w.data.T)
    if b is not None:
        out = out + b.data

    def bw(g):
        gx = g @ w.data if x.requires_grad else None
        gw = None
        if w.requires_grad:
            gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if b is None:
            return gx, gw
        gb = g.reshape(-1, g.shape[-1]).sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    inputs = (x, w) if b is None else (x, w, b)
    return record(out, inputs, bw)


def transpose(a: Tensor) -> Tensor:
    return record(a.data.T, (a,), lambda g: (g.T,))


# ---------------------------------------------------------------------------
# shape manipulation


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero parts")
    ndim = parts[0].data.ndim
    ax = axis % ndim if ndim else 0
    try:
        out = np.concatenate([p.data for p in parts], axis=ax)
    except ValueError:
        raise DimensionError(
            f"concat axis mismatch: {', '.join(str(q.shape) for q in parts)}") from None

    def bw(g):
        idx = [slice(None)] * g.ndim
        grads = []
        start = 0
        for p in parts:
            stop = start + p.shape[ax]
            if p.requires_grad:
                idx[ax] = slice(start, stop)
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
            start = stop
        return grads

    return record(out, parts, bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("stack of zero parts")

    def bw(g):
        return [np.take(g, i, axis=axis) if p.requires_grad else None
                for i, p in enumerate(parts)]

    return record(np.stack([p.data for p in parts], axis=axis), parts, bw)


def reshape(a: Tensor, shape) -> Tensor:
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; the backward pass scatter-adds."""

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record(a.data[index], (a,), bw)


def take_rows(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (full,)

    return record(table.data[ids], (table,), bw)


def pick(a: Tensor, ids) -> Tensor:
    """Select ``a[..., ids]`` entry-wise along the last axis."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != a.shape[:-1]:
        raise DimensionError(f"pick index shape {ids.shape} does not match {a.shape[:-1]}")
    lead = np.indices(ids.shape)
    index = tuple(lead) + (ids,)

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record(a.data[index], (a,), bw)


# ---------------------------------------------------------------------------
# reductions


def sum_all(a: Tensor) -> Tensor:
    return record(np.asarray(a.data.sum(), dtype=a.dtype), (a,),
                  lambda g: (np.broadcast_to(g, a.shape).copy(),))


def sum_axis(a: Tensor, axis: int, keepdims: bool = False) -> Tensor:
    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


# ---------------------------------------------------------------------------
# normalisation


def softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("softmax of empty input")
    x = logits.data
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (logits,), bw)


def log_softmax(logits: Tensor, axis: int = -1) -> Tensor:
    if logits.size == 0 or logits.shape[axis] == 0:
        raise DimensionError("log_softmax of empty input")
    x = logits.data
    shifted = x - x.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (logits,), bw)


# ---------------------------------------------------------------------------
# differentiation


def backward(loss: Tensor, tape: Tape) -> None:
    """Propagate d(loss) through ``tape`` into every leaf that requires grad.

    Leaf gradients accumulate into ``.grad``; the tape is cleared afterwards.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    try:
        if loss.node_id is None:
            # loss does not depend on any recorded operation
            return
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(loss.node_id, -1, -1):
            g = grads.pop(nid, None)
            if g is None:
                continue
            rec = tape.records[nid]
            in_grads = rec.backward(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.node_id is not None:
                    prev = grads.get(t.node_id)
                    grads[t.node_id] = gi if prev is None else prev + gi
                else:
                    t.grad = gi.astype(t.dtype, copy=True) if t.grad is None else t.grad + gi
    finally:
        tape.clear()


def grad_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5) -> float:
    """Maximum relative error between analytic and central-difference gradients.

    ``f`` builds a scalar loss from ``point``; ``point.data`` must be float64.
    """
    if point.dtype != np.float64:
        raise TypeError("grad_check requires a float64 point")
    point.requires_grad = True
    point.grad = None
    with Tape() as tape:
        loss = f(point)
    backward(loss, tape)
    analytic = point.grad if point.grad is not None else np.zeros_like(point.data)
    numeric = central_difference(lambda: float(f(point).data), point.data, h)
    return max_relative_error(analytic, numeric)


def central_difference(evaluate: Callable[[], float], arr: np.ndarray, h: float = 1e-5,
                       coords: Optional[Sequence[int]] = None) -> np.ndarray:
    """Finite-difference gradient of ``evaluate()`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    out = np.zeros(flat.shape, dtype=np.float64)
    for i in (range(flat.size) if coords is None else coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = evaluate()
        flat[i] = orig - h
        fm = evaluate()
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(arr.shape)


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    err = np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)
    return float(err.max()) if err.size else 0.0
