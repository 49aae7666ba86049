"""Minimal tape-based reverse-mode differentiation over float64 numpy arrays.

Every differentiable op appends a record to the tape of the current thread
whenever one of its inputs requires a gradient. :func:`backward` walks the
tape in reverse from the loss, accumulates gradients into the leaves and
clears the tape.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_record")

    __array_priority__ = 100  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._record = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._record is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else shift(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else shift(self, -np.asarray(other))

    def __rsub__(self, other):
        return shift(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- tape -----------------------------------------------------------------------


class Tape:
    """Ordered record of (output, inputs, backward closure) triples."""

    def __init__(self):
        self.records: list = []

    def __len__(self):
        return len(self.records)

    def record(self, out: Tensor, inputs: tuple, backward: Callable) -> None:
        out._record = len(self.records)
        self.records.append((out, inputs, backward))

    def clear(self) -> None:
        for out, _, _ in self.records:
            out._record = None
        self.records.clear()


_local = threading.local()


def get_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def grad_enabled() -> bool:
    return getattr(_local, "enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.enabled = False
    try:
        yield
    finally:
        _local.enabled = prev


def _result(data, inputs: tuple, backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._record = None
    out.requires_grad = grad_enabled() and any(t.requires_grad for t in inputs)
    if out.requires_grad:
        get_tape().record(out, inputs, backward)
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires-grad leaf on the tape."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = get_tape()
    if loss._record is None or loss._record >= len(tape) or tape.records[loss._record][0] is not loss:
        raise ContractError("loss was not produced through the current tape")
    grads = {id(loss): np.ones_like(loss.data)}
    try:
        for out, inputs, fn in reversed(tape.records[: loss._record + 1]):
            g = grads.pop(id(out), None)
            if g is None:
                # not an ancestor of the loss, but its leaves still get a zero grad
                for t in inputs:
                    if t.requires_grad and t.is_leaf and t.grad is None:
                        t.grad = np.zeros_like(t.data)
                continue
            for t, gt in zip(inputs, fn(g)):
                if not t.requires_grad:
                    continue
                if t.is_leaf:
                    if t.grad is None:
                        t.grad = np.zeros_like(t.data)
                    if gt is not None:
                        t.grad += gt
                elif gt is not None:
                    key = id(t)
                    if key in grads:
                        grads[key] = grads[key] + gt
                    else:
                        grads[key] = gt
    finally:
        tape.clear()


# -- ops ------------------------------------------------------------------------


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _row_broadcast(op: str, a: Tensor, b: Tensor) -> Optional[int]:
    """Which operand (0 or 1) is a row vector broadcast over the other's rows, or None."""
    if a.shape == b.shape:
        return None
    if b.data.ndim == 2 and a.data.ndim == 2 and b.shape[0] == 1 and b.shape[1] == a.shape[1]:
        return 1
    if a.data.ndim == 2 and b.data.ndim == 2 and a.shape[0] == 1 and a.shape[1] == b.shape[1]:
        return 0
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    A, B = a.data, b.data
    return _result(A @ B, (a, b), lambda g: (g @ B.T if a.requires_grad else None,
                                             A.T @ g if b.requires_grad else None))


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; a (1, n) row vector broadcasts over the rows of the other operand."""
    a, b = as_tensor(a), as_tensor(b)
    which = _row_broadcast("add", a, b)
    if which is None:
        return _result(a.data + b.data, (a, b), lambda g: (g, g))
    if which == 1:
        return _result(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=0, keepdims=True)))
    return _result(a.data + b.data, (a, b), lambda g: (g.sum(axis=0, keepdims=True), g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same("sub", a, b)
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def shift(a: Tensor, c) -> Tensor:
    """a + c for a constant scalar c."""
    c = np.asarray(c, dtype=np.float64)
    if c.size != 1:
        raise ShapeError(f"shift: constant must be a scalar, got shape {c.shape}")
    return _result(a.data + c, (a,), lambda g: (g,))


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, s) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a single-element operand acts as a trainable scalar factor."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        A, B = a.data, b.data
        return _result(A * B, (a, b), lambda g: (g * B, g * A))
    swap = a.size == 1 and b.size != 1
    if swap:
        a, b = b, a
    if b.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    A, s = a.data, b.data

    def fn(g):
        ga, gs = g * s.reshape(()), np.reshape(np.sum(g * A), s.shape)
        return (gs, ga) if swap else (ga, gs)

    return _result(A * s.reshape(()), (b, a) if swap else (a, b), fn)


def scale_rows(x: Tensor, c: Tensor) -> Tensor:
    """Multiply row k of x (n, d) by c[k] for a column c of shape (n, 1)."""
    x, c = as_tensor(x), as_tensor(c)
    if c.shape != (x.shape[0], 1):
        raise ShapeError(f"scale_rows: shapes {x.shape} and {c.shape} are incompatible")
    X, C = x.data, c.data
    return _result(X * C, (x, c), lambda g: (g * C, np.sum(g * X, axis=1, keepdims=True)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _result(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _result(y, (a,), lambda g: (g * y * (1.0 - y),))


def identity(a: Tensor) -> Tensor:
    return a


def row_softmax(a: Tensor) -> Tensor:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    return _result(y, (a,), lambda g: (y * (g - np.sum(g * y, axis=1, keepdims=True)),))


def log_softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def cross_entropy(logits: Tensor, labels, index=None) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits), over ``index`` rows."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.data.ndim != 2 or labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    rows = np.arange(logits.shape[0]) if index is None else np.asarray(index, dtype=np.int64)
    if rows.size == 0:
        raise ContractError("cross_entropy over an empty index set")
    logp = log_softmax_np(logits.data[rows])
    loss = -np.mean(logp[np.arange(rows.size), labels[rows]])

    def fn(g):
        p = np.exp(logp)
        p[np.arange(rows.size), labels[rows]] -= 1.0
        full = np.zeros_like(logits.data)
        np.add.at(full, rows, p * (g / rows.size))
        return (full,)

    return _result(np.asarray(loss), (logits,), fn)


def sum_all(a: Tensor) -> Tensor:
    return _result(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def spmm(S: sp.spmatrix, x: Tensor) -> Tensor:
    """Constant sparse matrix times dense tensor."""
    x = as_tensor(x)
    if S.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm: sparse {S.shape} and dense {x.shape} are incompatible")
    ST = None

    def fn(g):
        nonlocal ST
        if ST is None:
            ST = S.T.tocsr()
        return (np.asarray(ST @ g),)

    return _result(np.asarray(S @ x.data), (x,), fn)


def take_rows(x: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        return (full,)

    return _result(x.data[idx], (x,), fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout with a constant mask drawn from ``rng``."""
    if rate <= 0.0:
        return x
    if rate >= 1.0:
        raise ValueError("dropout rate must be < 1")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


ACTIVATIONS = {"identity": identity, "tanh": tanh, "relu": relu}
