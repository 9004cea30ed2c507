"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design: every differentiable op records a node (inputs, output, backward
rule) on the innermost active Tape. Nodes are appended in execution order,
which is a topological order by construction. backward() walks the tape in
reverse once, accumulating adjoints; leaf tensors with requires_grad=True
collect them in .grad. With no tape active, ops run as plain numpy forward
passes (used for frozen-policy rollouts and evaluation).

Tensors are immutable once written by a forward pass. Tapes are rebuilt per
training step; concurrent callers must use disjoint tapes.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NumkitError(Exception):
    """Base error for kernel contract violations."""


class DimensionError(NumkitError):
    """Operand shapes incompatible with the requested op."""


class Tensor:
    """A dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "is_leaf")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.is_leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise NumkitError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeNode:
    __slots__ = ("inputs", "output", "backward_fn")

    def __init__(self, inputs, output, backward_fn):
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of ops; replaying it backward visits each node once."""

    def __init__(self):
        self.nodes: list[TapeNode] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def record(self, inputs, output, backward_fn) -> None:
        self.nodes.append(TapeNode(inputs, output, backward_fn))

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every leaf's .grad.

        Repeated calls without zero_grad accumulate. Intermediate adjoints
        live in a local buffer so re-walking the tape stays exact.
        """
        if loss.size != 1:
            raise NumkitError(
                f"backward() needs a scalar loss, got shape {loss.shape}"
            )
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        if loss.is_leaf and loss.requires_grad:
            loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self.nodes):
            g_out = adjoint.pop(id(node.output), None)
            if g_out is None:
                continue
            grads = node.backward_fn(g_out)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.is_leaf:
                    inp.accumulate_grad(g)
                else:
                    buf = adjoint.get(id(inp))
                    if buf is None:
                        adjoint[id(inp)] = g.copy()
                    else:
                        buf += g


_TAPE_STACK: list[Tape] = []


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def backward(loss: Tensor) -> None:
    """Run reverse mode over the current tape from a scalar loss."""
    tape = active_tape()
    if tape is None:
        raise NumkitError("backward() called with no active tape")
    tape.backward(loss)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _apply(inputs: Sequence[Tensor], out_data: np.ndarray,
           backward_fn: Callable) -> Tensor:
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.is_leaf = False
        tape.record(tuple(inputs), out, backward_fn)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _apply((a, b), out, bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _apply((a, b), out, bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _apply((a,), -a.data, lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _apply((a, b), out, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard 2-D matrix product; backward accumulates into both operands."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(
            f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return _apply((a, b), out, bw)


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise DimensionError(f"transpose needs a 2-D tensor, got {a.shape}")
    return _apply((a,), a.data.T.copy(), lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    out = a.data.reshape(shape).copy()
    return _apply((a,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, bounds, axis=axis))

    return _apply(tuple(ts), out, bw)


def slice_rows(a: Tensor, lo: int, hi: int) -> Tensor:
    a = as_tensor(a)
    out = a.data[lo:hi].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[lo:hi] = g
        return (full,)

    return _apply((a,), out, bw)


def slice_cols(a: Tensor, lo: int, hi: int) -> Tensor:
    a = as_tensor(a)
    out = a.data[:, lo:hi].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        full[:, lo:hi] = g
        return (full,)

    return _apply((a,), out, bw)


def repeat_rows(a: Tensor, k: int) -> Tensor:
    """Repeat each row k times: [R x C] -> [R*k x C]."""
    a = as_tensor(a)
    out = np.repeat(a.data, k, axis=0)
    r, c = a.shape

    def bw(g):
        return (g.reshape(r, k, c).sum(axis=1),)

    return _apply((a,), out, bw)


def sum_row_groups(a: Tensor, k: int) -> Tensor:
    """Sum each consecutive group of k rows: [R*k x C] -> [R x C]."""
    a = as_tensor(a)
    rk, c = a.shape
    if rk % k != 0:
        raise DimensionError(f"row count {rk} not divisible by group size {k}")
    out = a.data.reshape(rk // k, k, c).sum(axis=1)

    def bw(g):
        return (np.repeat(g, k, axis=0),)

    return _apply((a,), out, bw)


def tsum(a: Tensor) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g, shape).astype(np.float64),)

    return _apply((a,), np.asarray(a.data.sum()), bw)


def tmean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.size
    shape = a.shape

    def bw(g):
        return (np.broadcast_to(g / n, shape).astype(np.float64),)

    return _apply((a,), np.asarray(a.data.mean()), bw)


# ---------------------------------------------------------------------------
# elementwise nonlinearities
# ---------------------------------------------------------------------------


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return _apply((a,), np.log(a.data), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _apply((a,), out, lambda g: (g * out,))


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _apply((a,), out, lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-np.abs(a.data)))
    out = np.where(a.data >= 0, out, 1.0 - out)
    return _apply((a,), out, lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)
    return _apply((a,), out, lambda g: (g * (a.data > 0.0),))


# ---------------------------------------------------------------------------
# softmax family (max-subtraction / log-sum-exp, mandatory for RL logits)
# ---------------------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _apply((a,), out, bw)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _apply((a,), out, bw)


# ---------------------------------------------------------------------------
# gathers
# ---------------------------------------------------------------------------


def take_rows(table: Tensor, ids) -> Tensor:
    """Row lookup (embedding): [R x C], ids [n] -> [n x C]."""
    table = as_tensor(table)
    idx = np.asarray(ids, dtype=np.intp)
    out = table.data[idx].copy()

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _apply((table,), out, bw)


def take_entries(a: Tensor, rows, cols) -> Tensor:
    """Pick a[rows[i], cols[i]] for each i -> [n]."""
    a = as_tensor(a)
    r = np.asarray(rows, dtype=np.intp)
    c = np.asarray(cols, dtype=np.intp)
    out = a.data[r, c].copy()

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, (r, c), g)
        return (full,)

    return _apply((a,), out, bw)


def take_index(a: Tensor, cols) -> Tensor:
    """Per-row pick: a[i, cols[i]] -> [R]."""
    a = as_tensor(a)
    return take_entries(a, np.arange(a.shape[0]), cols)
