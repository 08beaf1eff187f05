"""Dense float64 tensors with reverse-mode automatic differentiation.

Every operation records itself onto the thread's active gradient tape when
any input requires a gradient. ``backward`` replays the tape in exact reverse
recording order, which is a valid reverse topological order because inputs of
an operation are always recorded before it.

A tape and the tensors recorded on it belong to one thread; independent
training runs on separate threads never share mutable state.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ContractError, DomainError, ShapeError

_STATE = threading.local()


def _tape_stack():
    stack = getattr(_STATE, "stack", None)
    if stack is None:
        stack = [Tape()]
        _STATE.stack = stack
    return stack


def active_tape():
    """The tape new operations are recorded on (per thread)."""
    return _tape_stack()[-1]


class no_grad:
    """Context manager that disables tape recording (cheap inference passes)."""

    def __enter__(self):
        self._prev = getattr(_STATE, "recording", True)
        _STATE.recording = False
        return self

    def __exit__(self, *exc):
        _STATE.recording = self._prev
        return False


def _recording():
    return getattr(_STATE, "recording", True)


class Tape:
    """Ordered record of operations: (output, parents, gradient rule)."""

    def __init__(self):
        self._records = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        _tape_stack().pop()
        return False

    def __len__(self):
        return len(self._records)

    def record(self, out, parents, grad_fn):
        self._records.append((out, parents, grad_fn))

    def clear(self):
        self._records.clear()


class Tensor:
    """N-dimensional float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy(), requires_grad=False)

    def backward(self):
        backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    # Arithmetic sugar; scalars go through the constant-scale path.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(out_data, parents, grad_fn):
    out = Tensor(out_data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad and _recording():
        tape = active_tape()
        out._tape = tape
        tape.record(out, parents, grad_fn)
    return out


def backward(loss):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate additively across multiple uses of the same tensor.
    """
    if not isinstance(loss, Tensor) or loss.data.size != 1:
        raise ContractError("backward expects a scalar loss tensor")
    tape = loss._tape
    if tape is None or len(tape) == 0:
        raise ContractError("backward called with an empty tape (loss has no recorded history)")
    loss.grad = np.ones_like(loss.data)
    for out, parents, grad_fn in reversed(tape._records):
        if out.grad is None:
            continue
        grad_fn(out.grad, parents)


# ---------------------------------------------------------------------------
# primitives


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError("matmul", a.data.shape, b.data.shape)

    def grad_fn(g, parents):
        x, y = parents
        _accumulate(x, g @ y.data.T)
        _accumulate(y, x.data.T @ g)

    return _make(a.data @ b.data, (a, b), grad_fn)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("add", a.data.shape, b.data.shape)

    def grad_fn(g, parents):
        _accumulate(parents[0], g)
        _accumulate(parents[1], g)

    return _make(a.data + b.data, (a, b), grad_fn)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("sub", a.data.shape, b.data.shape)

    def grad_fn(g, parents):
        _accumulate(parents[0], g)
        _accumulate(parents[1], -g)

    return _make(a.data - b.data, (a, b), grad_fn)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("elementwise_mul", a.data.shape, b.data.shape)

    def grad_fn(g, parents):
        x, y = parents
        _accumulate(x, g * y.data)
        _accumulate(y, g * x.data)

    return _make(a.data * b.data, (a, b), grad_fn)


def scale(a, c):
    a = as_tensor(a)
    c = float(c)

    def grad_fn(g, parents):
        _accumulate(parents[0], g * c)

    return _make(a.data * c, (a,), grad_fn)


def broadcast_add(a, b):
    """a + b where b broadcasts against a (bias rows); grad of b sums the broadcast axes."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out_data = a.data + b.data
    except ValueError:
        raise ShapeError("broadcast_add", a.data.shape, b.data.shape)
    if out_data.shape != a.data.shape:
        raise ShapeError("broadcast_add", a.data.shape, b.data.shape)

    def grad_fn(g, parents):
        x, y = parents
        _accumulate(x, g)
        gy = g
        extra = gy.ndim - y.data.ndim
        if extra:
            gy = gy.sum(axis=tuple(range(extra)))
        collapse = tuple(i for i, n in enumerate(y.data.shape) if n == 1 and gy.shape[i] != 1)
        if collapse:
            gy = gy.sum(axis=collapse, keepdims=True)
        _accumulate(y, gy.reshape(y.data.shape))

    return _make(out_data, (a, b), grad_fn)


def relu(a):
    a = as_tensor(a)

    def grad_fn(g, parents):
        # Subgradient at exactly 0 is 0.
        _accumulate(parents[0], g * (parents[0].data > 0))

    return _make(np.maximum(a.data, 0.0), (a,), grad_fn)


def exp(a):
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def grad_fn(g, parents):
        _accumulate(parents[0], g * out_data)

    return _make(out_data, (a,), grad_fn)


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of non-positive input")

    def grad_fn(g, parents):
        _accumulate(parents[0], g / parents[0].data)

    return _make(np.log(a.data), (a,), grad_fn)


def tanh(a):
    a = as_tensor(a)
    out_data = np.tanh(a.data)

    def grad_fn(g, parents):
        _accumulate(parents[0], g * (1.0 - out_data * out_data))

    return _make(out_data, (a,), grad_fn)


def absolute(a):
    a = as_tensor(a)

    def grad_fn(g, parents):
        # sign(0) = 0: subgradient at the kink.
        _accumulate(parents[0], g * np.sign(parents[0].data))

    return _make(np.abs(a.data), (a,), grad_fn)


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def grad_fn(g, parents):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accumulate(parents[0], (g - dot) * out_data)

    return _make(out_data, (a,), grad_fn)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out_data = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g, parents):
        _accumulate(parents[0], g - np.exp(out_data) * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (a,), grad_fn)


def _reduce_grad(g, in_shape, axis):
    if axis is None:
        return np.broadcast_to(g, in_shape).copy()
    return np.broadcast_to(np.expand_dims(g, axis), in_shape).copy()


def sum(a, axis=None):  # noqa: A001 - numpy-style reduction name
    a = as_tensor(a)

    def grad_fn(g, parents):
        _accumulate(parents[0], _reduce_grad(g, parents[0].data.shape, axis))

    return _make(a.data.sum(axis=axis), (a,), grad_fn)


def mean(a, axis=None):
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]

    def grad_fn(g, parents):
        _accumulate(parents[0], _reduce_grad(g, parents[0].data.shape, axis) / n)

    return _make(a.data.mean(axis=axis), (a,), grad_fn)


def max(a, axis=None):  # noqa: A001 - numpy-style reduction name
    a = as_tensor(a)
    if axis is None:
        idx = np.argmax(a.data)
        out_data = a.data.reshape(-1)[idx]

        def grad_fn(g, parents):
            full = np.zeros_like(parents[0].data)
            full.reshape(-1)[idx] = np.asarray(g).reshape(())
            _accumulate(parents[0], full)

    else:
        idx = np.argmax(a.data, axis=axis)  # ties route to the first maximum
        out_data = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

        def grad_fn(g, parents):
            full = np.zeros_like(parents[0].data)
            np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
            _accumulate(parents[0], full)

    return _make(out_data, (a,), grad_fn)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat of zero tensors")
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def grad_fn(g, parents):
        for t, lo, hi in zip(parents, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), grad_fn)


def transpose(a):
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ShapeError("transpose", a.data.shape)

    def grad_fn(g, parents):
        _accumulate(parents[0], g.T)

    return _make(a.data.T.copy(), (a,), grad_fn)


def reshape(a, shape):
    a = as_tensor(a)

    def grad_fn(g, parents):
        _accumulate(parents[0], g.reshape(parents[0].data.shape))

    return _make(a.data.reshape(shape).copy(), (a,), grad_fn)


def rows(a, start, stop):
    """Contiguous slice along axis 0; gradient scatters back into place."""
    a = as_tensor(a)
    if not (0 <= start < stop <= a.data.shape[0]):
        raise ShapeError("rows", a.data.shape, (start, stop))

    def grad_fn(g, parents):
        full = np.zeros_like(parents[0].data)
        full[start:stop] = g
        _accumulate(parents[0], full)

    return _make(a.data[start:stop].copy(), (a,), grad_fn)


def l2_normalize(a, axis=-1, eps=0.0):
    """Rows scaled to unit L2 norm along ``axis``.

    With eps = 0 a zero-norm slice is a DomainError; with eps > 0 the norm is
    floored at eps and the gradient treats the floored denominator as constant.
    """
    a = as_tensor(a)
    norms = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    if eps == 0.0:
        if np.any(norms == 0.0):
            raise DomainError("l2_normalize of zero-norm input")
        denom = norms
    else:
        denom = np.maximum(norms, eps)
    out_data = a.data / denom

    def grad_fn(g, parents):
        live = norms > eps
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        full = np.where(live, (g - out_data * dot) / denom, g / denom)
        _accumulate(parents[0], full)

    return _make(out_data, (a,), grad_fn)


def cosine_similarity(a, b, axis=-1, eps=1e-12):
    """Cosine of the angle between ``a`` and ``b`` slices along ``axis``.

    Norms are floored at eps so zero vectors give 0 instead of an error.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape != b.data.shape:
        raise ShapeError("cosine_similarity", a.data.shape, b.data.shape)
    na = np.maximum(np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True)), eps)
    nb = np.maximum(np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True)), eps)
    dots = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = dots / (na * nb)

    def grad_fn(g, parents):
        x, y = parents
        ge = np.expand_dims(g, axis)
        _accumulate(x, ge * (y.data / (na * nb) - cos * x.data / (na * na)))
        _accumulate(y, ge * (x.data / (na * nb) - cos * y.data / (nb * nb)))

    return _make(np.squeeze(cos, axis=axis), (a, b), grad_fn)


def stop_gradient(a):
    """Value passes through, gradient does not."""
    return Tensor(as_tensor(a).data.copy(), requires_grad=False)


# Dispatch table for the primitive forward contract (used by the grad suite
# and the selftest command).
PRIMITIVES = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "elementwise_mul": mul,
    "scale": scale,
    "broadcast_add": broadcast_add,
    "relu": relu,
    "exp": exp,
    "log": log,
    "tanh": tanh,
    "abs": absolute,
    "softmax": softmax,
    "log_softmax": log_softmax,
    "sum": sum,
    "mean": mean,
    "max": max,
    "concat": concat,
    "transpose": transpose,
    "reshape": reshape,
    "rows": rows,
    "l2_normalize": l2_normalize,
    "cosine_similarity": cosine_similarity,
    "stop_gradient": stop_gradient,
}


def primitive_forward(op_kind, *inputs, **kwargs):
    """Apply a primitive by name; unknown names raise ContractError."""
    try:
        fn = PRIMITIVES[op_kind]
    except KeyError:
        raise ContractError(f"unknown primitive {op_kind!r}")
    return fn(*inputs, **kwargs)
