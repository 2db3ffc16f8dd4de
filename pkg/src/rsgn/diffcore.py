"""Small tape-based reverse-mode autodiff over float64 numpy arrays.

Operations only record themselves while a :class:`Tape` is active on the
current thread; outside a tape they are plain numpy computations, which is
what the finite-difference checker and inference paths use.
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

EXP_CLAMP = 40.0
# Upper bound on temporaries of the row-exact matmul kernel (elements).
_CHUNK_ELEMS = 1 << 22


class DimensionError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")
    # numpy defers to the reflected operators below instead of broadcasting
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.grad = np.zeros_like(arr)
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a single element, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs, output, backward):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_state = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Records primitives executed inside ``with Tape() as tape:``.

    The record is already in topological order, so ``backward`` replays it in
    reverse. A tape can be consumed once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, inputs, output: Tensor, backward) -> None:
        self.nodes.append(_Node(inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError("backward() already called on this tape; run a fresh forward pass")
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._consumed = True
        loss.grad += 1.0
        for node in reversed(self.nodes):
            g = node.output.grad
            if not g.any():
                continue
            node.backward(g)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(out_data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = np.zeros_like(out_data)
    out.requires_grad = needs
    out.name = None
    if needs:
        tape.record(tuple(inputs), out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.requires_grad:
        t.grad += _unbroadcast(g, t.shape)


# ---------------------------------------------------------------- linear algebra

def _row_exact_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Every entry is a pairwise sum over a contiguous row of products, so it
    # depends only on (row of a, column of b): permuting rows of ``a`` permutes
    # the result bit-for-bit, which BLAS does not guarantee.
    m, k = a.shape
    n = b.shape[1]
    bt = np.ascontiguousarray(b.T)
    out = np.empty((m, n))
    rows = max(1, _CHUNK_ELEMS // max(1, n * k))
    for lo in range(0, m, rows):
        hi = min(m, lo + rows)
        out[lo:hi] = (a[lo:hi, None, :] * bt[None, :, :]).sum(axis=-1)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _emit(_row_exact_matmul(a.data, b.data), (a, b), backward)


def order_free_matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product whose value does not depend on the order of the
    contraction index: products are sorted before summation.

    Used for graph aggregation so that relabelling the nodes relabels the
    result exactly.
    """
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    prods = a.data[:, None, :] * np.ascontiguousarray(b.data.T)[None, :, :]
    prods.sort(axis=-1)
    out = prods.sum(axis=-1)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _emit(out, (a, b), backward)


def transpose(x: Tensor) -> Tensor:
    x = _wrap(x)
    if x.data.ndim != 2:
        raise DimensionError(f"transpose needs a matrix, got shape {x.shape}")

    def backward(g):
        _accum(x, g.T)

    return _emit(np.ascontiguousarray(x.data.T), (x,), backward)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _emit(out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub shape mismatch: {a.shape} - {b.shape}") from None

    def backward(g):
        _accum(a, g)
        _accum(b, -g)

    return _emit(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul shape mismatch: {a.shape} * {b.shape}") from None

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _emit(out, (a, b), backward)


def _check_finite(x: Tensor, op: str) -> None:
    if not np.all(np.isfinite(x.data)):
        bad = x.data[~np.isfinite(x.data)].reshape(-1)[0]
        raise FloatingPointError(f"{op}: non-finite input value {bad}")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -EXP_CLAMP, EXP_CLAMP)))


POINTWISE_OPS = ("sigmoid", "tanh", "relu", "exp", "neg", "square")


def pointwise(op: str, x: Tensor) -> Tensor:
    x = _wrap(x)
    _check_finite(x, op)
    d = x.data
    if op == "sigmoid":
        out = _sigmoid(d)
        deriv = out * (1.0 - out) * (np.abs(d) <= EXP_CLAMP)
    elif op == "tanh":
        out = np.tanh(d)
        deriv = 1.0 - out * out
    elif op == "relu":
        out = np.maximum(d, 0.0)
        deriv = (d > 0).astype(np.float64)
    elif op == "exp":
        out = np.exp(np.clip(d, -EXP_CLAMP, EXP_CLAMP))
        deriv = out * (np.abs(d) <= EXP_CLAMP)
    elif op == "neg":
        out = -d
        deriv = None
    elif op == "square":
        out = d * d
        deriv = 2.0 * d
    else:
        raise ValueError(f"unknown pointwise op {op!r}; expected one of {POINTWISE_OPS}")

    def backward(g):
        _accum(x, -g if deriv is None else g * deriv)

    return _emit(out, (x,), backward)


def sigmoid(x):
    return pointwise("sigmoid", x)


def tanh(x):
    return pointwise("tanh", x)


def relu(x):
    return pointwise("relu", x)


def exp(x):
    return pointwise("exp", x)


def neg(x):
    return pointwise("neg", x)


def square(x):
    return pointwise("square", x)


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    if np.any(x.data <= 0):
        raise FloatingPointError(f"log: non-positive input value {x.data[x.data <= 0].reshape(-1)[0]}")

    def backward(g):
        _accum(x, g / x.data)

    return _emit(np.log(x.data), (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    x = _wrap(x)
    inside = (x.data >= lo) & (x.data <= hi)

    def backward(g):
        _accum(x, g * inside)

    return _emit(np.clip(x.data, lo, hi), (x,), backward)


# ---------------------------------------------------------------- structure

def reduce(op: str, x: Tensor, axis: int | None = None) -> Tensor:
    x = _wrap(x)
    if axis is not None and not -x.data.ndim <= axis < x.data.ndim:
        raise DimensionError(f"invalid axis {axis} for shape {x.shape}")
    if op == "sum":
        out = x.data.sum(axis=axis)
        scale = 1.0
    elif op == "mean":
        out = x.data.mean(axis=axis)
        scale = 1.0 / (x.size if axis is None else x.shape[axis])
    else:
        raise ValueError(f"unknown reduction {op!r}")
    out = np.atleast_1d(np.asarray(out, dtype=np.float64))

    def backward(g):
        if axis is None:
            full = np.full(x.shape, g.reshape(-1)[0] * scale)
        else:
            full = np.broadcast_to(np.expand_dims(g, axis) * scale, x.shape)
        _accum(x, full)

    return _emit(out, (x,), backward)


def sum_(x, axis=None):
    return reduce("sum", x, axis)


def mean(x, axis=None):
    return reduce("mean", x, axis)


def concat(a: Tensor, b: Tensor, axis: int = 0) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.data.ndim != b.data.ndim:
        raise DimensionError(f"concat rank mismatch: {a.shape} and {b.shape}")
    ax = axis % a.data.ndim
    for i, (p, q) in enumerate(zip(a.shape, b.shape)):
        if i != ax and p != q:
            raise DimensionError(f"concat extent mismatch on axis {i}: {a.shape} and {b.shape}")
    split = a.shape[ax]

    def backward(g):
        ga, gb = np.split(g, [split], axis=ax)
        _accum(a, ga)
        _accum(b, gb)

    return _emit(np.concatenate([a.data, b.data], axis=ax), (a, b), backward)


def cols(x: Tensor, start: int, stop: int) -> Tensor:
    """Column slice ``x[:, start:stop]``."""
    x = _wrap(x)

    def backward(g):
        if x.requires_grad:
            x.grad[:, start:stop] += g

    return _emit(x.data[:, start:stop].copy(), (x,), backward)


def take_rows(x: Tensor, index) -> Tensor:
    x = _wrap(x)
    idx = np.asarray(index, dtype=np.int64)

    def backward(g):
        if x.requires_grad:
            np.add.at(x.grad, idx, g)

    return _emit(x.data[idx].copy(), (x,), backward)


def row_softmax(x: Tensor) -> Tensor:
    x = _wrap(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        _accum(x, out * (g - (g * out).sum(axis=1, keepdims=True)))

    return _emit(out, (x,), backward)


# ---------------------------------------------------------------- checking

def check_gradient(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    step: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` is called with ``x`` unchanged (a tensor or a list of tensors) and
    must return a one-element tensor. The error per entry is
    ``|analytic - numeric| / max(1, |numeric|)``. ``max_entries`` caps the
    number of entries probed per tensor (chosen with ``seed``).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    tensors = [x] if isinstance(x, Tensor) else list(x)
    saved = [(t.requires_grad, t.grad.copy()) for t in tensors]
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with Tape() as tape:
        y = f(x)
    if y.size != 1:
        raise DimensionError(f"check_gradient needs a scalar-valued f, got shape {y.shape}")
    tape.backward(y)
    analytic = [t.grad.copy() for t in tensors]

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t, ga in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        entries = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            entries = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        for i in entries:
            orig = flat[i]
            flat[i] = orig + step
            up = f(x).item()
            flat[i] = orig - step
            down = f(x).item()
            flat[i] = orig
            num = (up - down) / (2.0 * step)
            err = abs(ga.reshape(-1)[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    for t, (rg, g) in zip(tensors, saved):
        t.requires_grad = rg
        t.grad[...] = g
    return worst
