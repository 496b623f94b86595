"""Tape-based reverse-mode automatic differentiation over float64 numpy arrays.

Operations record themselves on the innermost active :class:`Tape`.  Outside a
tape nothing is recorded, which makes plain forward evaluation cheap (the
same behaviour as a ``no_grad`` block in larger frameworks).

Example::

    w = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        loss = (w * w).sum()
    tape.backward(loss)
    w.grad  # -> array([2., 2., 2.])
"""
from __future__ import annotations

import itertools
import threading

import numpy as np

LOG_FLOOR = 1e-12

_state = threading.local()
_tape_ids = itertools.count(1)


class GradientError(RuntimeError):
    """Raised for misuse of the tape (reuse, non-scalar roots, foreign nodes)."""


def _tape_stack():
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array that can take part in a recorded compute graph."""

    __slots__ = ("data", "_grad", "requires_grad", "node_id", "tape", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self._grad = None
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self.tape = None
        self.name = name

    # -- basic accessors -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def grad(self):
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.data.shape:
            raise ValueError(f"gradient shape {value.shape} does not match values {self.data.shape}")
        self._grad = value

    def zero_grad(self):
        self._grad = None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operator sugar --------------------------------------------------
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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self, floor=LOG_FLOOR):
        return log(self, floor)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)

    def clamp(self, lo=None, hi=None):
        return clamp(self, lo, hi)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of differentiable operations.

    A tape is single-use: :meth:`backward` may run once.  Records are appended
    as operations execute, so parents always precede their children.
    """

    def __init__(self):
        self.id = next(_tape_ids)
        self.records = []
        self.consumed = False
        self._owner = threading.get_ident()

    def __enter__(self):
        if self.consumed:
            raise GradientError("cannot record on a tape that has already run backward")
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise GradientError("tape stack corrupted; tapes must be exited in LIFO order")
        stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def _record(self, out, parents, backward_fn, kernel):
        if threading.get_ident() != self._owner:
            raise GradientError("a tape may only be used from the thread that created it")
        for p in parents:
            if p.tape is not None and p.tape is not self:
                raise GradientError(f"{kernel}: operand belongs to a different tape")
        out.node_id = len(self.records)
        out.tape = self
        out.requires_grad = True
        self.records.append((out, parents, backward_fn, kernel))

    def backward(self, root):
        if self.consumed:
            raise GradientError("backward already ran on this tape")
        if root.data.size != 1:
            raise GradientError(f"backward needs a scalar root, got shape {root.shape}")
        if root.tape is not self:
            raise GradientError("root was not recorded on this tape")
        self.consumed = True
        root._grad = np.ones_like(root.data)
        for out, parents, backward_fn, _ in reversed(self.records):
            g = out._grad
            if g is None:
                continue
            grads = backward_fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                if p._grad is None:
                    p._grad = np.array(pg, dtype=np.float64, copy=True).reshape(p.shape)
                else:
                    p._grad += pg
            # intermediate buffers are not needed once propagated
            if out is not root and out.tape is self:
                out._grad = None


def make_op(data, parents, backward_fn, kernel):
    """Wrap ``data`` as the output of ``kernel`` and record it when needed."""
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape._record(out, parents, backward_fn, kernel)
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` following numpy broadcasting rules."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(kernel, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{kernel}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ---------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), backward, "mul")


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    out_data = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out_data / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(out_data, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent):
    a = as_tensor(a)
    p = float(exponent)
    if p == 2.0:
        out_data = a.data * a.data
        return make_op(out_data, (a,), lambda g: (2.0 * g * a.data,), "square")
    out_data = a.data ** p
    return make_op(out_data, (a,), lambda g: (g * p * a.data ** (p - 1.0),), "power")


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)
    return make_op(out_data, (a,), lambda g: (g * out_data,), "exp")


def log(a, floor=LOG_FLOOR):
    """Natural log with inputs clamped from below at ``floor``."""
    a = as_tensor(a)
    if floor is None:
        safe = a.data
        return make_op(np.log(safe), (a,), lambda g: (g / safe,), "log")
    safe = np.maximum(a.data, floor)
    live = a.data > floor

    def backward(g):
        return (np.where(live, g / safe, 0.0),)

    return make_op(np.log(safe), (a,), backward, "log")


def sqrt(a):
    a = as_tensor(a)
    out_data = np.sqrt(a.data)
    return make_op(out_data, (a,), lambda g: (g * 0.5 / out_data,), "sqrt")


def clamp(a, lo=None, hi=None):
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)
    live = np.ones(a.shape, dtype=bool)
    if lo is not None:
        live &= a.data >= lo
    if hi is not None:
        live &= a.data <= hi
    return make_op(out_data, (a,), lambda g: (np.where(live, g, 0.0),), "clamp")


def relu(a):
    a = as_tensor(a)
    live = a.data > 0
    # np.maximum keeps NaN, so a diverged activation cannot be silently zeroed
    return make_op(np.maximum(a.data, 0.0), (a,), lambda g: (np.where(live, g, 0.0),), "relu")


# -- structural ----------------------------------------------------------

def reshape(a, shape):
    a = as_tensor(a)
    try:
        out_data = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from None
    return make_op(out_data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def _is_basic_index(index):
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a, index):
    a = as_tensor(a)
    out_data = a.data[index]
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_op(out_data, (a,), backward, "slice")


def take_rows(a, rows):
    """Select rows (first axis) of ``a`` by integer index array."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, rows, g)
        return (full,)

    return make_op(a.data[rows], (a,), backward, "take_rows")


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(
            x != y for i, (x, y) in enumerate(zip(ref, t.shape)) if i != axis % len(ref)
        ):
            raise ValueError(f"concat: incompatible shapes {ref} and {t.shape} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_op(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward, "concat")


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def reduce_sum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_op(out_data, (a,), backward, "reduce_sum")


def reduce_mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size // max(out_data.size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape),)

    return make_op(out_data, (a,), backward, "reduce_mean")


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), backward, "matmul")


def softmax(a, axis=1):
    """Softmax along ``axis``, stabilised by subtracting the running max."""
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out_data * (g - (g * out_data).sum(axis=axis, keepdims=True)),)

    return make_op(out_data, (a,), backward, "softmax")


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_keep = np.log(s) + m
    weights = np.exp(a.data - out_keep)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    out_data = out_keep if keepdims else np.squeeze(out_keep, axis=axis)
    return make_op(out_data, (a,), backward, "logsumexp")
