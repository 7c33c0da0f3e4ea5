"""Dense double-precision tensors with a define-by-run reverse-mode tape.

The tape is rebuilt on every forward pass: each operation returns a new
Tensor holding its value, its parent tensors, and a closure that maps the
output adjoint to parent adjoints. Graphs here are tiny (shallow MLPs plus
a closed-form geophysical decoder), so simplicity beats caching.

Values are float64 throughout; the geophysical decoder mixes km-scale
geometry with mm-scale outputs and single precision loses the signal.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Operand shapes do not conform; carries both shapes in the message."""


class NonScalarLossError(ValueError):
    """backward() was called on a non-scalar tensor."""


class Tensor:
    """Array value plus an optional tape node (parents and adjoint rule)."""

    __slots__ = ("data", "parents", "grad_fn")

    def __init__(self, data, parents=(), grad_fn=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.parents = tuple(parents)
        self.grad_fn = grad_fn

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def is_leaf(self) -> bool:
        return not self.parents

    def __repr__(self):
        tag = "leaf" if self.is_leaf() else "node"
        return f"Tensor(shape={self.data.shape}, {tag})"

    # -- operator sugar ----------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent):
        return power(self, exponent)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def detach(t: Tensor) -> Tensor:
    """Same values, no tape parents: gradients never flow through the result."""
    return Tensor(t.data)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum an adjoint over the axes numpy broadcast to reach ``grad``'s shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary ops --------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), grad_fn)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def grad_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor(a.data - b.data, (a, b), grad_fn)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")

    def grad_fn(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), grad_fn)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def grad_fn(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        )

    return Tensor(out, (a, b), grad_fn)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), grad_fn)


def transpose(t: Tensor) -> Tensor:
    t = as_tensor(t)
    if t.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got shape {t.shape}")

    def grad_fn(g):
        return (g.T,)

    return Tensor(t.data.T, (t,), grad_fn)


def outer(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: expected two vectors, got shapes {a.shape} and {b.shape}")

    def grad_fn(g):
        return g @ b.data, g.T @ a.data

    return Tensor(np.outer(a.data, b.data), (a, b), grad_fn)


def concat_last(tensors) -> Tensor:
    """Concatenate along the last axis."""
    ts = [as_tensor(t) for t in tensors]
    lead = ts[0].shape[:-1]
    for t in ts[1:]:
        if t.shape[:-1] != lead:
            raise ShapeError(
                f"concat_last: leading dims differ, {ts[0].shape} vs {t.shape}"
            )
    widths = [t.shape[-1] for t in ts]

    def grad_fn(g):
        pieces, start = [], 0
        for w in widths:
            pieces.append(g[..., start:start + w])
            start += w
        return tuple(pieces)

    return Tensor(np.concatenate([t.data for t in ts], axis=-1), tuple(ts), grad_fn)


def slice_last(t: Tensor, start: int, stop: int) -> Tensor:
    """Narrow along the last axis; the adjoint zero-pads back."""
    t = as_tensor(t)

    def grad_fn(g):
        full = np.zeros_like(t.data)
        full[..., start:stop] = g
        return (full,)

    return Tensor(t.data[..., start:stop], (t,), grad_fn)


# -- elementwise unary ops ----------------------------------------------------

def exp(t) -> Tensor:
    t = as_tensor(t)
    out = np.exp(t.data)

    def grad_fn(g):
        return (g * out,)

    return Tensor(out, (t,), grad_fn)


def log(t) -> Tensor:
    # Operands must be strictly positive; callers clip before taking logs.
    t = as_tensor(t)

    def grad_fn(g):
        return (g / t.data,)

    return Tensor(np.log(t.data), (t,), grad_fn)


def sigmoid(t) -> Tensor:
    t = as_tensor(t)
    x = t.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))

    def grad_fn(g):
        return (g * out * (1.0 - out),)

    return Tensor(out, (t,), grad_fn)


def softplus(t) -> Tensor:
    t = as_tensor(t)
    out = np.logaddexp(0.0, t.data)

    def grad_fn(g):
        x = t.data
        sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                       np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
        return (g * sig,)

    return Tensor(out, (t,), grad_fn)


def tanh(t) -> Tensor:
    t = as_tensor(t)
    out = np.tanh(t.data)

    def grad_fn(g):
        return (g * (1.0 - out * out),)

    return Tensor(out, (t,), grad_fn)


def arctan(t) -> Tensor:
    t = as_tensor(t)

    def grad_fn(g):
        return (g / (1.0 + t.data * t.data),)

    return Tensor(np.arctan(t.data), (t,), grad_fn)


def square(t) -> Tensor:
    t = as_tensor(t)

    def grad_fn(g):
        return (g * 2.0 * t.data,)

    return Tensor(t.data * t.data, (t,), grad_fn)


def sqrt(t) -> Tensor:
    t = as_tensor(t)
    out = np.sqrt(t.data)

    def grad_fn(g):
        return (g * 0.5 / out,)

    return Tensor(out, (t,), grad_fn)


def power(t, exponent: float) -> Tensor:
    t = as_tensor(t)
    p = float(exponent)

    def grad_fn(g):
        return (g * p * np.power(t.data, p - 1.0),)

    return Tensor(np.power(t.data, p), (t,), grad_fn)


def clamp(t, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; the adjoint is zero where clipping engaged."""
    t = as_tensor(t)
    out = np.clip(t.data, lo, hi)

    def grad_fn(g):
        inside = (t.data >= lo) & (t.data <= hi)
        return (g * inside,)

    return Tensor(out, (t,), grad_fn)


# -- reductions ---------------------------------------------------------------

def mean(t) -> Tensor:
    t = as_tensor(t)

    def grad_fn(g):
        return (np.full_like(t.data, g / t.data.size),)

    return Tensor(t.data.mean(), (t,), grad_fn)


def tsum(t) -> Tensor:
    t = as_tensor(t)

    def grad_fn(g):
        return (np.full_like(t.data, g),)

    return Tensor(t.data.sum(), (t,), grad_fn)


# -- reverse-mode accumulation ------------------------------------------------

def _topo_order(root: Tensor):
    """Post-order over the parent DAG: every parent precedes its consumers."""
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params) -> dict:
    """Accumulate d(loss)/d(p) for every tensor in ``params``.

    Returns a dict keyed by the parameter tensors themselves. Parameters the
    loss does not reach get exact zero gradients.
    """
    if loss.data.shape != ():
        raise NonScalarLossError(
            f"backward expects a scalar loss, got shape {loss.data.shape}"
        )
    order = _topo_order(loss)
    adjoints = {id(loss): np.ones(())}
    for node in reversed(order):
        g = adjoints.get(id(node))
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            pid = id(parent)
            if pid in adjoints:
                adjoints[pid] = adjoints[pid] + pg
            else:
                adjoints[pid] = pg
    out = {}
    for p in params:
        g = adjoints.get(id(p))
        if g is None:
            out[p] = Tensor(np.zeros_like(p.data))
        else:
            out[p] = Tensor(np.broadcast_to(g, p.data.shape).copy())
    return out
