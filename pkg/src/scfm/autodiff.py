"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records operations as they execute; ``backward`` replays the
record once, in reverse, accumulating gradients additively into every
gradient-tracked leaf.  Only the op set needed by the small networks and
log-probability computations in this repository is provided, and broadcasting
is restricted to scalar-with-tensor; anything else must go through an
explicit ``broadcast_to`` / ``reshape`` so shape bugs fail loudly.
"""

from __future__ import annotations

import math
import threading

import numpy as np

__all__ = [
    "Tape",
    "Tensor",
    "tensor",
    "parameter",
    "backward",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "exp",
    "log",
    "tsum",
    "tmean",
    "softmax",
    "log_softmax",
    "logsumexp",
    "take",
    "take_rows",
    "take_along_rows",
    "scatter_sum",
    "concat",
    "broadcast_to",
    "reshape",
    "finite_difference_check",
]

_LOCAL = threading.local()


def _active_tape():
    return getattr(_LOCAL, "tape", None)


class Tape:
    """Ordered record of executed ops; consumable by a single backward pass."""

    def __init__(self):
        self._entries = []  # (out, inputs, backward_fn), append order = topological
        self._next_id = 0
        self.consumed = False

    def __enter__(self):
        if _active_tape() is not None:
            raise RuntimeError("a Tape is already active on this thread")
        _LOCAL.tape = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _LOCAL.tape = None
        return False

    def _register(self, t):
        if t._tape is not self:
            t._tape = self
            t.node_id = self._next_id
            self._next_id += 1
        return t.node_id

    def _record(self, out, inputs, backward_fn):
        for x in inputs:
            self._register(x)
        self._register(out)
        self._entries.append((out, inputs, backward_fn))

    def backward(self, loss):
        """Run reverse accumulation from scalar ``loss``.

        Returns a map from node-id to gradient array covering every tensor
        that received a gradient; gradients are also left on ``t.grad``.
        """
        if self.consumed:
            raise RuntimeError("computation record already consumed by a backward pass")
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        self.consumed = True
        for out, inputs, _ in self._entries:
            out.grad = None
            for x in inputs:
                x.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, inputs, backward_fn in reversed(self._entries):
            if out.grad is None:
                continue
            backward_fn(out.grad)
        grads = {}
        for out, inputs, _ in self._entries:
            for t in (out, *inputs):
                if t.grad is not None:
                    grads[t.node_id] = t.grad
        return grads


class Tensor:
    """Dense float64 array with an optional link into the active Tape."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_tape")

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not math.isfinite(arr.sum()):
            raise FloatingPointError("non-finite values in tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data)

    def detach(self):
        """Value-only copy: constant under any subsequent differentiation."""
        return Tensor(self.data)

    def _add_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g)  # copy: g may be a view or another tensor's buffer
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars may be python numbers or size-1 tensors
    def __add__(self, other):
        return add(self, _lift(other))

    def __radd__(self, other):
        return add(_lift(other), self)

    def __sub__(self, other):
        return sub(self, _lift(other))

    def __rsub__(self, other):
        return sub(_lift(other), self)

    def __mul__(self, other):
        return mul(self, _lift(other))

    def __rmul__(self, other):
        return mul(_lift(other), self)

    def __truediv__(self, other):
        return div(self, _lift(other))

    def __rtruediv__(self, other):
        return div(_lift(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _lift(other))

    def tanh(self):
        return tanh(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def broadcast_to(self, shape):
        return broadcast_to(self, shape)


def tensor(data):
    """Constant tensor (no gradient tracking)."""
    return Tensor(data)


def parameter(data):
    """Learnable leaf tensor."""
    return Tensor(data, requires_grad=True)


def backward(loss):
    """Backward pass through the tape that recorded ``loss``."""
    if loss._tape is None:
        raise RuntimeError("loss carries no computation record (was it built under a Tape?)")
    return loss._tape.backward(loss)


def _lift(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _check_finite(arr, op):
    # a single fused reduction: any nan/inf propagates into the sum
    if not math.isfinite(arr.sum()):
        raise FloatingPointError(f"non-finite result in op '{op}'")


def _make(arr, op, inputs, backward_fn):
    arr = np.asarray(arr)
    _check_finite(arr, op)
    tape = _active_tape()
    tracked = tape is not None and any(x.requires_grad for x in inputs)
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.requires_grad = tracked
    out.grad = None
    out.node_id = None
    out._tape = None
    if tracked:
        tape._record(out, [x for x in inputs if x.requires_grad], backward_fn)
    return out


def _binary_shapes(a, b, op):
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ValueError(
        f"op '{op}' requires equal shapes or a scalar operand, got {a.shape} and {b.shape}"
    )


def _reduce_to(g, shape):
    # collapse a gradient onto a scalar operand's shape
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b):
    _binary_shapes(a, b, "add")
    arr = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._add_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._add_grad(_reduce_to(g, b.shape))

    return _make(arr, "add", (a, b), bwd)


def sub(a, b):
    _binary_shapes(a, b, "sub")
    arr = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            a._add_grad(_reduce_to(g, a.shape))
        if b.requires_grad:
            b._add_grad(_reduce_to(-g, b.shape))

    return _make(arr, "sub", (a, b), bwd)


def mul(a, b):
    _binary_shapes(a, b, "mul")
    arr = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._add_grad(_reduce_to(g * b.data, a.shape))
        if b.requires_grad:
            b._add_grad(_reduce_to(g * a.data, b.shape))

    return _make(arr, "mul", (a, b), bwd)


def div(a, b):
    _binary_shapes(a, b, "div")
    arr = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._add_grad(_reduce_to(g / b.data, a.shape))
        if b.requires_grad:
            b._add_grad(_reduce_to(-g * a.data / (b.data * b.data), b.shape))

    return _make(arr, "div", (a, b), bwd)


def neg(a):
    def bwd(g):
        a._add_grad(-g)

    return _make(-a.data, "neg", (a,), bwd)


def matmul(a, b):
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul requires 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    arr = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            a._add_grad(g @ b.data.T)
        if b.requires_grad:
            b._add_grad(a.data.T @ g)

    return _make(arr, "matmul", (a, b), bwd)


def tanh(a):
    arr = np.tanh(a.data)

    def bwd(g):
        a._add_grad(g * (1.0 - arr * arr))

    return _make(arr, "tanh", (a,), bwd)


def exp(a):
    arr = np.exp(a.data)

    def bwd(g):
        a._add_grad(g * arr)

    return _make(arr, "exp", (a,), bwd)


def log(a):
    arr = np.log(a.data)

    def bwd(g):
        a._add_grad(g / a.data)

    return _make(arr, "log", (a,), bwd)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    arr = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bwd(g):
        a._add_grad(_expand_reduced(g, a.shape, axis, keepdims))

    return _make(arr, "sum", (a,), bwd)


def tmean(a, axis=None, keepdims=False):
    arr = np.mean(a.data, axis=axis, keepdims=keepdims)
    n = a.size if axis is None else a.shape[axis]

    def bwd(g):
        a._add_grad(_expand_reduced(g, a.shape, axis, keepdims) / n)

    return _make(arr, "mean", (a,), bwd)


def logsumexp(a, keepdims=False):
    """log-sum-exp over the last axis, computed stably."""
    m = np.max(a.data, axis=-1, keepdims=True)
    s = np.exp(a.data - m)
    arr = np.squeeze(m, -1) + np.log(np.sum(s, axis=-1))
    soft = s / np.sum(s, axis=-1, keepdims=True)
    out_arr = arr[..., None] if keepdims else arr

    def bwd(g):
        gg = g if keepdims else g[..., None]
        a._add_grad(gg * soft)

    return _make(out_arr, "logsumexp", (a,), bwd)


def softmax(a):
    """softmax over the last axis."""
    m = np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(a.data - m)
    arr = e / np.sum(e, axis=-1, keepdims=True)

    def bwd(g):
        inner = np.sum(g * arr, axis=-1, keepdims=True)
        a._add_grad(arr * (g - inner))

    return _make(arr, "softmax", (a,), bwd)


def log_softmax(a):
    """log-softmax over the last axis."""
    m = np.max(a.data, axis=-1, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    arr = shifted - lse
    soft = np.exp(arr)

    def bwd(g):
        a._add_grad(g - soft * np.sum(g, axis=-1, keepdims=True))

    return _make(arr, "log_softmax", (a,), bwd)


def take(a, indices):
    """Gather from a 1-D tensor with an arbitrary-shape integer index array."""
    if a.ndim != 1:
        raise ValueError(f"take expects a 1-D tensor, got shape {a.shape}")
    idx = np.asarray(indices)
    arr = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._add_grad(buf)

    return _make(arr, "take", (a,), bwd)


def take_rows(a, indices):
    """Gather rows of a 2-D tensor: out[i] = a[indices[i]]."""
    if a.ndim != 2:
        raise ValueError(f"take_rows expects a 2-D tensor, got shape {a.shape}")
    idx = np.asarray(indices)
    arr = a.data[idx]

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._add_grad(buf)

    return _make(arr, "take_rows", (a,), bwd)


def take_along_rows(a, indices):
    """Per-row gather on the last axis: out[..., k] = a[..., indices[..., k]]."""
    idx = np.asarray(indices)
    if idx.ndim != a.ndim:
        raise ValueError(
            f"take_along_rows needs an index array of rank {a.ndim}, got rank {idx.ndim}"
        )
    arr = np.take_along_axis(a.data, idx, axis=-1)

    def bwd(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, _along_index(a.shape, idx), g)
        a._add_grad(buf)

    return _make(arr, "take_along_rows", (a,), bwd)


def _along_index(shape, idx):
    grids = np.meshgrid(*[np.arange(n) for n in idx.shape], indexing="ij")
    return tuple(grids[:-1]) + (idx,)


def scatter_sum(values, indices, size):
    """Sum 1-D ``values`` into ``size`` bins given by ``indices``."""
    if values.ndim != 1:
        raise ValueError(f"scatter_sum expects a 1-D tensor, got shape {values.shape}")
    idx = np.asarray(indices)
    buf = np.zeros(size, dtype=np.float64)
    np.add.at(buf, idx, values.data)

    def bwd(g):
        values._add_grad(g[idx])

    return _make(buf, "scatter_sum", (values,), bwd)


def concat(tensors, axis=0):
    tensors = list(tensors)
    arr = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._add_grad(g[tuple(sl)])

    return _make(arr, "concat", tuple(tensors), bwd)


def broadcast_to(a, shape):
    """Explicit broadcast; the gradient sums over the broadcast axes."""
    arr = np.broadcast_to(a.data, shape).copy()

    def bwd(g):
        extra = g.ndim - a.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, n in enumerate(a.shape) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        a._add_grad(g)

    return _make(arr, "broadcast_to", (a,), bwd)


def reshape(a, shape):
    arr = a.data.reshape(shape)

    def bwd(g):
        a._add_grad(g.reshape(a.shape))

    return _make(arr, "reshape", (a,), bwd)


def finite_difference_check(f, params, step=1e-5):
    """Max relative error between analytic and central-difference gradients.

    ``f`` maps a parameter tensor to a scalar Tensor and must be
    deterministic (the caller freezes any randomness).  The analytic
    gradient comes from one taped backward pass; the numeric one perturbs
    each coordinate by ``step``.
    """
    with Tape() as tape:
        loss = f(params)
    tape.backward(loss)
    analytic = params.grad.copy() if params.grad is not None else np.zeros_like(params.data)

    flat = params.data.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(f(params).data)
        flat[i] = orig - step
        lo = float(f(params).data)
        flat[i] = orig
        numeric[i] = (hi - lo) / (2.0 * step)
    numeric = numeric.reshape(params.shape)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(numeric) + 1e-8)))
