"""Small reverse-mode autodiff over dense float64 numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and
a closure mapping the output gradient to parent gradients.  ``backward``
walks the recorded graph once in reverse topological order.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

DTYPE = np.float64
_state = threading.local()


@contextlib.contextmanager
def no_grad():
    """Run primitives without recording backward rules (this thread only)."""
    prev = getattr(_state, "off", False)
    _state.off = True
    try:
        yield
    finally:
        _state.off = prev


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "grad_fn", "op")

    def __init__(self, data, requires_grad=False, parents=(), grad_fn=None, op=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op
        # leaves own a persistent grad buffer; unreached leaves keep zeros
        self.grad = np.zeros_like(self.data) if requires_grad and not parents else None

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0.0

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents, grad_fn, op):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs or getattr(_state, "off", False):
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, grad_fn=grad_fn, op=op)


def _check_same(a: Tensor, b: Tensor, op: str):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def record(loss: Tensor) -> list[Tensor]:
    """Executed nodes reachable from ``loss`` in topological order (inputs first)."""
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor):
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if not loss.parents:
        loss.grad += 1.0
        return
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(record(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if not node.parents:
            node.grad += g
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# ---------------------------------------------------------------- primitives


def matmul(a, b) -> Tensor:
    """Batched matrix product; ``b`` may be a shared 2-D weight."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    out = np.matmul(a.data, b.data)

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return _result(out, (a, b), grad_fn, "matmul")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same(a, b, "mul")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "mul")


def add_broadcast(x, bias) -> Tensor:
    """``x + bias`` where ``bias`` broadcasts against ``x`` (row bias, bias matrix)."""
    x, bias = as_tensor(x), as_tensor(bias)
    try:
        shape = np.broadcast_shapes(x.shape, bias.shape)
    except ValueError:
        raise ShapeError(f"add_broadcast: shape mismatch {x.shape} vs {bias.shape}") from None
    if shape != x.shape:
        raise ShapeError(f"add_broadcast: shape mismatch {x.shape} vs {bias.shape}")
    return _result(
        x.data + bias.data, (x, bias), lambda g: (g, _unbroadcast(g, bias.shape)), "add_broadcast"
    )


def mul_const(x, c) -> Tensor:
    """Elementwise product with a constant array broadcastable to ``x``."""
    x = as_tensor(x)
    c = np.asarray(c, dtype=DTYPE)
    return _result(x.data * c, (x,), lambda g: (g * c,), "mul_const")


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data * c, (x,), lambda g: (g * c,), "scale")


def softmax_rows(x, mask=None) -> Tensor:
    """Softmax over the last axis; ``mask`` is an additive constant (0 or -inf)."""
    x = as_tensor(x)
    z = x.data if mask is None else x.data + mask
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result(p, (x,), grad_fn, "softmax_rows")


def log(x, floor: float | None = None) -> Tensor:
    """Natural log; entries below ``floor`` are clamped (zero gradient there)."""
    x = as_tensor(x)
    v = x.data if floor is None else np.maximum(x.data, floor)

    def grad_fn(g):
        gx = g / v
        if floor is not None:
            gx = np.where(x.data >= floor, gx, 0.0)
        return (gx,)

    return _result(np.log(v), (x,), grad_fn, "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _result(out, (x,), lambda g: (g * out,), "exp")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def add_const(x, c: float) -> Tensor:
    x = as_tensor(x)
    return _result(x.data + c, (x,), lambda g: (g,), "add_const")


def sum(x, axis=None) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(out, (x,), grad_fn, "sum")


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / count)


def relu(x) -> Tensor:
    x = as_tensor(x)
    on = x.data > 0
    return _result(np.where(on, x.data, 0.0), (x,), lambda g: (g * on,), "relu")


def gather_row(table, index) -> Tensor:
    """Rows of a 2-D ``table`` selected by an integer array of any shape."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.intp)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_row: table must be 2-D, got {table.shape}")

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _result(table.data[index], (table,), grad_fn, "gather_row")


def select_positions(x, positions) -> Tensor:
    """From ``x`` of shape (B, n, d) pick row ``positions[b]`` of batch item b."""
    x = as_tensor(x)
    positions = np.asarray(positions, dtype=np.intp)
    if x.data.ndim != 3 or positions.shape != (x.shape[0],):
        raise ShapeError(f"select_positions: shape mismatch {x.shape} vs {positions.shape}")
    batch = np.arange(x.shape[0])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        gx[batch, positions] = g
        return (gx,)

    return _result(x.data[batch, positions], (x,), grad_fn, "select_positions")


def take(x, rows, cols) -> Tensor:
    """Entries ``x[rows[k], cols[k]]`` of a 2-D tensor as a vector."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _result(x.data[rows, cols], (x,), grad_fn, "take")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _result(
        np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),), "transpose"
    )


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: shape mismatch {x.shape} vs {gamma.shape}/{beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    xhat = (x.data - mu) * inv
    width = x.shape[-1]

    def grad_fn(g):
        gxhat = g * gamma.data
        gx = inv / width * (
            width * gxhat
            - gxhat.sum(axis=-1, keepdims=True)
            - xhat * (gxhat * xhat).sum(axis=-1, keepdims=True)
        )
        gg = (g * xhat).reshape(-1, width).sum(axis=0)
        gb = g.reshape(-1, width).sum(axis=0)
        return gx, gg, gb

    return _result(xhat * gamma.data + beta.data, (x, gamma, beta), grad_fn, "layer_norm")
