"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Every op returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
orders the reachable graph topologically (the tape) and accumulates.

Forward ops that reduce over rows use order-independent arithmetic
(einsum products, sorted column sums) so that permuting the rows of an
input permutes the output rows bit-for-bit.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

_ids = itertools.count()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class NonFiniteError(FloatingPointError):
    """A forward value contained NaN or Inf."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "node_id", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _backward=None, op: str = "leaf"):
        # leaves copy their input; op outputs are already fresh arrays
        arr = np.array(data, dtype=np.float64) if op == "leaf" else np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value produced by op '{op}'")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.op = op
        self.node_id = next(_ids)
        self._parents: tuple[Tensor, ...] = tuple(_parents)
        self._backward: Callable | None = _backward

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _lift(other, self.shape))

    def __radd__(self, other):
        return add(_lift(other, self.shape), self)

    def __sub__(self, other):
        return sub(self, _lift(other, self.shape))

    def __rsub__(self, other):
        return sub(_lift(other, self.shape), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _lift(value, shape) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(shape, float(value)))


def _make(data, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    needs = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=parents if needs else (), _backward=backward if needs else None, op=op)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _colsum(x: np.ndarray, group: int = 1) -> np.ndarray:
    # sorting first makes the sum independent of row order; with group > 1 only
    # the order of whole row blocks is free, so blocks are summed before sorting
    if group > 1:
        x = x.reshape(-1, group, x.shape[1]).sum(axis=1)
    return np.sort(x, axis=0).sum(axis=0)


# --------------------------------------------------------------------------
# core ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    out = np.einsum("ik,kj->ij", a.data, b.data)

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _make(out, (a, b), backward, "matmul")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return _make(np.where(mask, x.data, 0.0), (x,), backward, "relu")


def sigmoid(x: Tensor) -> Tensor:
    z = x.data
    # split by sign so exp never overflows
    ez = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))

    def backward(g):
        return (g * s * (1.0 - s),)

    return _make(s, (x,), backward, "sigmoid")


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5, group: int = 1) -> Tensor:
    """Per-column normalization with training-mode batch statistics.

    ``group`` declares that rows come in fixed-order blocks of that size (edge
    rows of one point); statistics are then invariant to permuting blocks.
    """
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm expects N x C input, got {x.shape}")
    n, c = x.shape
    if n < 2:
        raise ShapeError(f"batch_norm: degenerate batch of {n} row(s); need at least 2")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match {c} channels")
    if group < 1 or n % group:
        raise ShapeError(f"batch_norm: {n} rows do not split into blocks of {group}")
    mu = _colsum(x.data, group) / n
    xc = x.data - mu
    var = _colsum(xc * xc, group) / n
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        dxhat = g * gamma.data
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make(out, (x, gamma, beta), backward, "batch_norm")


def max_pool_points(x: Tensor) -> Tensor:
    """Column-wise max over the point axis; ties go to the lowest row."""
    if x.data.ndim != 2 or x.shape[0] < 1:
        raise ShapeError(f"max_pool_points expects N x C with N >= 1, got {x.shape}")
    idx = np.argmax(x.data, axis=0)
    cols = np.arange(x.shape[1])
    out = x.data[idx, cols][None, :]

    def backward(g):
        dx = np.zeros_like(x.data)
        dx[idx, cols] = g[0]
        return (dx,)

    return _make(out, (x,), backward, "max_pool_points")


def group_max(x: Tensor, group: int) -> Tensor:
    """Max over consecutive row groups: (M*group) x C -> M x C."""
    rows, c = x.shape
    if group < 1 or rows % group:
        raise ShapeError(f"group_max: {rows} rows not divisible into groups of {group}")
    blocks = x.data.reshape(rows // group, group, c)
    idx = np.argmax(blocks, axis=1)
    out = np.take_along_axis(blocks, idx[:, None, :], axis=1)[:, 0, :]

    def backward(g):
        d = np.zeros_like(blocks)
        np.put_along_axis(d, idx[:, None, :], g[:, None, :], axis=1)
        return (d.reshape(rows, c),)

    return _make(out, (x,), backward, "group_max")


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, op)
    if op == "add":
        return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")
    if op == "sub":
        return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")
    if op == "mul":
        return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")
    if op == "mean2":
        return _make((a.data + b.data) / 2.0, (a, b), lambda g: (g / 2.0, g / 2.0), "mean2")
    raise ValueError(f"unknown elementwise op {op!r}")


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def mean2(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mean2", a, b)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty list")
    ndim = tensors[0].data.ndim
    if not -ndim <= axis < ndim:
        raise ShapeError(f"concat: axis {axis} out of range for rank {ndim}")
    axis %= ndim
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(t.shape[d] != ref[d] for d in range(ndim) if d != axis):
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    if len(tensors) == 1:
        return tensors[0]
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def slice_axis(x: Tensor, start: int, stop: int, axis: int = 0) -> Tensor:
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, stop)
    index = tuple(index)

    def backward(g):
        d = np.zeros_like(x.data)
        d[index] = g
        return (d,)

    return _make(x.data[index], (x,), backward, "slice")


def gather_rows(x: Tensor, idx) -> Tensor:
    """Rows of ``x`` picked by an integer index array (repeats allowed)."""
    idx = np.asarray(idx, dtype=np.intp)

    def backward(g):
        # scatter-add by segment sums over the sorted index; np.add.at is slow
        d = np.zeros_like(x.data)
        if idx.size:
            order = np.argsort(idx, kind="stable")
            rows, starts = np.unique(idx[order], return_index=True)
            d[rows] = np.add.reduceat(g[order], starts, axis=0)
        return (d,)

    return _make(x.data[idx], (x,), backward, "gather_rows")


def tile_rows(x: Tensor, n: int) -> Tensor:
    """Repeat a 1 x C row ``n`` times."""
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"tile_rows expects a 1 x C tensor, got {x.shape}")
    return _make(np.repeat(x.data, n, axis=0), (x,), lambda g: (g.sum(axis=0, keepdims=True),), "tile_rows")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x`` (N x C) plus a length-C bias broadcast over rows."""
    if x.data.ndim != 2 or bias.shape != (x.shape[1],):
        raise ShapeError(f"add_bias: bias {bias.shape} does not fit {x.shape}")
    return _make(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0)), "add_bias")


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,), "scale")


def affine(x: Tensor, a: float, b: float) -> Tensor:
    """``a * x + b`` with constant coefficients."""
    return _make(a * x.data + b, (x,), lambda g: (g * a,), "affine")


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NonFiniteError("log of a non-positive value")
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,), "log")


def power(x: Tensor, p: float) -> Tensor:
    """``x ** p`` for non-negative ``x``."""
    if np.any(x.data < 0):
        raise ValueError("power expects non-negative input")
    out = x.data**p

    def backward(g):
        # derivative at 0 taken as 0 unless p == 1
        at_zero = 1.0 if p == 1 else 0.0
        safe = np.where(x.data > 0, x.data, 1.0)
        d = np.where(x.data > 0, p * safe ** (p - 1), at_zero)
        return (g * d,)

    return _make(out, (x,), backward, "power")


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,), "clamp")


def tsum(x: Tensor) -> Tensor:
    return _make(np.sum(x.data), (x,), lambda g: (np.full(x.shape, float(g)),), "sum")


def tmean(x: Tensor) -> Tensor:
    n = x.size
    return _make(np.sum(x.data) / n, (x,), lambda g: (np.full(x.shape, float(g) / n),), "mean")


# --------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Topologically ordered nodes of one backward pass and their gradients."""

    nodes: list[Tensor] = field(default_factory=list)
    gradients: dict[int, np.ndarray] = field(default_factory=dict)

    def grad_of(self, t: Tensor) -> np.ndarray | None:
        return self.gradients.get(t.node_id)


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(node) for every node reachable from ``loss``.

    Leaves that require gradients get ``.grad`` set (accumulated into any
    existing value). Leaves not reachable keep their old ``.grad``.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(nodes=_topo_order(loss))
    if not loss.requires_grad:
        return tape
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.node_id)
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    for node in tape.nodes:
        if node.is_leaf and node.node_id in grads:
            node.grad = grads[node.node_id] if node.grad is None else node.grad + grads[node.node_id]
    tape.gradients = grads
    return tape


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def sgd_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None] | None = None, lr: float = 0.01) -> Sequence[Tensor]:
    """In-place ``p <- p - lr * g``. Parameters without a gradient are left alone."""
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"sgd_step: {len(params)} params but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient {g.shape} does not match parameter {p.shape}")
        p.data = p.data - lr * g
    return params
