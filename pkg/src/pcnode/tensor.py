"""Dense float64 tensors with a define-by-run reverse-mode tape.

Only what the fixed architectures in this package need: rank <= 3 arrays,
a handful of primitives, and broadcasting restricted to a bias row, a
per-row column, or a scalar.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

MAX_RANK = 3
DTYPE = np.float64

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op: str, a: tuple, b: tuple | None = None):
        self.op = op
        self.shapes = (a, b)
        if b is None:
            msg = f"{op}: bad operand shape {a}"
        else:
            msg = f"{op}: incompatible shapes {a} and {b}"
        super().__init__(msg)


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


def _row_stable() -> bool:
    return getattr(_state, "row_stable", False)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


@contextlib.contextmanager
def row_stable():
    """Make matmul results of a row independent of the other rows in the batch.

    BLAS gemm picks different kernels depending on the batch extent, so a row
    computed alone may differ from the same row computed inside a batch in
    the last bits. This mode trades speed for bitwise row stability.
    """
    prev = _row_stable()
    _state.row_stable = True
    try:
        yield
    finally:
        _state.row_stable = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError("tensor", arr.shape)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = _backward
        self._consumed = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True).reshape(self.shape)
        else:
            self.grad += g.reshape(self.shape)

    def backward(self) -> None:
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __getitem__(self, idx):
        return slice_(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=DTYPE), requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _grad_enabled() and any(p.requires_grad for p in parents):
        return Tensor(data, True, tuple(parents), backward_fn)
    return Tensor(data)


# --- broadcasting ----------------------------------------------------------


def _check_broadcast(op: str, a: tuple, b: tuple) -> None:
    if a == b:
        return
    for x, y in ((a, b), (b, a)):
        if len(x) == 0 or all(s == 1 for s in x):
            return  # scalar
        if len(x) < len(y) and y[len(y) - len(x):] == x:
            return  # bias over leading batch extents
        if len(x) == len(y) and x[:-1] == y[:-1] and x[-1] == 1:
            return  # per-row column
    raise ShapeError(op, a, b)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# --- primitives --------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a.shape, b.shape)
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(out_data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a.shape, b.shape)
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(-g)

    return _make(-a.data, (a,), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a.shape, b.shape)
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), bw)


def _mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    if _row_stable():
        return np.einsum("...k,kn->...n", x, w)
    return x @ w


def matmul(a, b) -> Tensor:
    """(..., k) @ (k, n). The right operand is always a weight matrix."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    out_data = _mm(a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(g @ b.data.T)
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            b._accumulate(a2.T @ g.reshape(-1, g.shape[-1]))

    return _make(out_data, (a, b), bw)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ax = axis % ts[0].ndim
    for t in ts[1:]:
        if t.ndim != ts[0].ndim or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError("concat", ts[0].shape, t.shape)
    out_data = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                t._accumulate(np.take(g, np.arange(lo, hi), axis=ax))

    return _make(out_data, ts, bw)


def slice_(a: Tensor, idx) -> Tensor:
    out_data = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        if _is_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        a._accumulate(full)

    return _make(np.array(out_data, copy=True), (a,), bw)


def _is_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign to avoid exp overflow
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        a._accumulate(g * s * (1.0 - s))

    return _make(s, (a,), bw)


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)

    def bw(g):
        a._accumulate(g * (1.0 - y * y))

    return _make(y, (a,), bw)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    y = np.where(pos, a.data, 0.0)

    def bw(g):
        a._accumulate(g * pos)

    return _make(y, (a,), bw)


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    pos = a.data > 0
    y = np.where(pos, a.data, slope * a.data)

    def bw(g):
        a._accumulate(g * np.where(pos, 1.0, slope))

    return _make(y, (a,), bw)


def sum_(a: Tensor) -> Tensor:
    def bw(g):
        a._accumulate(np.broadcast_to(g, a.shape))

    return _make(np.asarray(a.data.sum()), (a,), bw)


def mean(a: Tensor) -> Tensor:
    n = a.data.size

    def bw(g):
        a._accumulate(np.broadcast_to(g / n, a.shape))

    return _make(np.asarray(a.data.mean()), (a,), bw)


def mse(pred, target) -> Tensor:
    """Mean squared error over every element. Target is treated as constant."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        if pred.requires_grad:
            pred._accumulate(g * 2.0 * diff / n)
        if target.requires_grad:
            target._accumulate(-g * 2.0 * diff / n)

    return _make(np.asarray(np.mean(diff * diff)), (pred, target), bw)


def row_mse(pred, target) -> Tensor:
    """Per-row mean squared error over the trailing axis, shape (batch,)."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape or pred.ndim != 2:
        raise ShapeError("row_mse", pred.shape, target.shape)
    diff = pred.data - target.data
    n = diff.shape[-1]

    def bw(g):
        gg = g[:, None] * 2.0 * diff / n
        if pred.requires_grad:
            pred._accumulate(gg)
        if target.requires_grad:
            target._accumulate(-gg)

    return _make(np.mean(diff * diff, axis=-1), (pred, target), bw)


def select_by_mask(a: Tensor, mask) -> Tensor:
    """Rows of ``a`` where ``mask`` is true."""
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 1 or a.ndim < 1 or a.shape[0] != mask.shape[0]:
        raise ShapeError("select_by_mask", a.shape, mask.shape)
    out_data = a.data[mask]

    def bw(g):
        full = np.zeros_like(a.data)
        full[mask] = g
        a._accumulate(full)

    return _make(out_data, (a,), bw)


def mask_blend(mask, a, b) -> Tensor:
    """Row i is ``a[i]`` where ``mask[i]`` else ``b[i]``.

    The mask is a constant decision: gradients reach only the selected source.
    """
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)
    if a.shape != b.shape:
        raise ShapeError("mask_blend", a.shape, b.shape)
    if mask.ndim != 1 or a.ndim < 1 or a.shape[0] != mask.shape[0]:
        raise ShapeError("mask_blend", mask.shape, a.shape)
    m = mask.reshape((-1,) + (1,) * (a.ndim - 1))
    out_data = np.where(m, a.data, b.data)

    def bw(g):
        if a.requires_grad:
            a._accumulate(np.where(m, g, 0.0))
        if b.requires_grad:
            b._accumulate(np.where(m, 0.0, g))

    return _make(out_data, (a, b), bw)


# --- tape replay -------------------------------------------------------------


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad ancestor.

    Intermediate grads are released after use and the tape is marked consumed.
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    if loss._consumed:
        raise RuntimeError("backward: tape already consumed for this loss")
    if not loss.requires_grad:
        return
    order = _topo_order(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        node._backward(node.grad)
        # interior node: drop its grad and links so memory is released
        node.grad = None
        node._backward = None
        node._parents = ()
        node._consumed = True


def parameters_of(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
