"""Reverse-mode automatic differentiation over dense numpy arrays.

A ``Tensor`` wraps one numpy array and records the op that produced it,
building an implicit acyclic tape as expressions are evaluated eagerly.
``Tensor.backward()`` walks the tape in reverse topological order and
accumulates gradients into every reachable ``Parameter`` whose
``trainable`` flag is set. Frozen parameters and plain inputs never
receive a ``.grad``.

Training code uses float32; gradient-check tests switch to float64 via
the ``dtype=`` arguments on constructors.
"""

from __future__ import annotations

import contextlib
import itertools

import numpy as np

DEFAULT_DTYPE = np.float32

_node_ids = itertools.count()
_grad_enabled = True
_finite_checks = True


class AutodiffError(Exception):
    """Base class for graph construction/execution failures."""


class ShapeError(AutodiffError):
    """Operand shapes are inconsistent for the op being built."""


class NonFiniteError(AutodiffError):
    """An op produced a NaN or infinity."""


class BackwardError(AutodiffError):
    """backward() called on an invalid root or an already-consumed tape."""


@contextlib.contextmanager
def no_grad():
    """Disable tape recording; ops return detached tensors."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def finite_checks(enabled):
    """Toggle the per-op finite-output check (on by default)."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = enabled
    try:
        yield
    finally:
        _finite_checks = prev


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in (np.float32, np.float64):
        return arr
    return arr.astype(DEFAULT_DTYPE)


def _check_finite(data, node):
    if _finite_checks and not np.all(np.isfinite(data)):
        flat = np.asarray(data).ravel()
        bad = int(np.argmin(np.isfinite(flat)))
        idx = tuple(int(i) for i in np.unravel_index(bad, np.shape(data))) if np.ndim(data) else ()
        raise NonFiniteError(
            f"non-finite value {float(flat[bad])} produced by node {node} at index {idx}"
        )


class Tensor:
    """One dense array plus the tape bookkeeping needed for backward()."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False, dtype=None, _op="leaf", _parents=()):
        self.data = _as_array(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad) and _grad_enabled
        self._op = _op
        self._parents = tuple(_parents) if self.requires_grad else ()
        self._backward = None
        self._id = next(_node_ids)

    # -- introspection ----------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def node(self):
        """Short identifier used in error messages, e.g. 'matmul#42'."""
        return f"{self._op}#{self._id}"

    def __repr__(self):
        return f"Tensor({self.node}, shape={self.shape}, dtype={self.data.dtype})"

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    # -- operator sugar ---------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)

    # -- backward ---------------------------------------------------------
    def _accumulate(self, g):
        if self.grad is None:
            self.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
        else:
            self.grad += g

    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every trainable leaf.

        The root must be scalar. The tape is single-use: the closures are
        dropped afterwards to release activation memory.
        """
        if self.data.size != 1:
            raise BackwardError(
                f"backward root must be scalar, got shape {self.shape} at node {self.node}"
            )
        if not self.requires_grad:
            raise BackwardError(
                "backward on a detached tensor: no forward graph was recorded "
                "(root does not depend on any trainable parameter)"
            )

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        self.grad = np.ones_like(self.data)
        consumed = False
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)
                consumed = True
                node._backward = None
                node._parents = ()
                if node is not self:
                    # op outputs only need their grad transiently
                    node.grad = None
        if not consumed and self._op != "leaf":
            raise BackwardError(
                f"tape for node {self.node} already consumed; rerun forward before backward"
            )


class Parameter(Tensor):
    """Named leaf array; ``trainable=False`` freezes it out of backward()."""

    __slots__ = ("name", "trainable")

    def __init__(self, data, name, trainable=True, dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = bool(trainable)
        # a Parameter keeps its flag even if constructed inside no_grad()
        self.requires_grad = self.trainable
        self._op = "param"

    def __repr__(self):
        kind = "trainable" if self.trainable else "frozen"
        return f"Parameter({self.name!r}, shape={self.shape}, {kind})"


def _lift(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, op, parents, backward):
    out = Tensor(
        data,
        requires_grad=any(p.requires_grad for p in parents),
        _op=op,
        _parents=[p for p in parents if p.requires_grad],
    )
    _check_finite(out.data, out.node)
    if out.requires_grad:
        out._backward = backward
    return out


def _check_same_dtype(op, *tensors):
    dtypes = {t.data.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{op}: mixed dtypes {sorted(map(str, dtypes))}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    _check_same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return _make(data, "add", (a, b), backward)


def sub(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    _check_same_dtype("sub", a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g, b.shape))

    return _make(data, "sub", (a, b), backward)


def mul(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    _check_same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make(data, "mul", (a, b), backward)


def div(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    _check_same_dtype("div", a, b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} do not broadcast") from None

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, "div", (a, b), backward)


def scale(a, s):
    """Multiply by a python scalar (recorded as its own node kind)."""
    a = _lift(a)
    s = float(s)
    data = a.data * np.asarray(s, dtype=a.data.dtype)

    def backward(g):
        a._accumulate(g * np.asarray(s, dtype=a.data.dtype))

    return _make(data, "scale", (a,), backward)


def exp(a):
    a = _lift(a)
    data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, "exp", (a,), backward)


def log(a):
    a = _lift(a)
    data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, "log", (a,), backward)


def sqrt(a):
    a = _lift(a)
    data = np.sqrt(a.data)

    def backward(g):
        a._accumulate(g * (0.5 / data))

    return _make(data, "sqrt", (a,), backward)


def tanh(a):
    a = _lift(a)
    data = np.tanh(a.data)

    def backward(g):
        a._accumulate(g * (1.0 - data * data))

    return _make(data, "tanh", (a,), backward)


def power(a, p):
    """Elementwise a**p for a constant exponent p."""
    a = _lift(a)
    p = float(p)
    data = a.data ** p

    def backward(g):
        a._accumulate(g * p * a.data ** (p - 1.0))

    return _make(data, "power", (a,), backward)


def clip_min(a, floor):
    """Elementwise max(a, floor) for a constant floor; gradient passes
    only where a exceeds the floor."""
    a = _lift(a)
    floor = float(floor)
    data = np.maximum(a.data, floor)

    def backward(g):
        a._accumulate(g * (a.data > floor))

    return _make(data, "clip_min", (a,), backward)


def gelu(a):
    """GELU with the tanh approximation (closed-form derivative)."""
    a = _lift(a)
    c = np.asarray(np.sqrt(2.0 / np.pi), dtype=a.data.dtype)
    k = np.asarray(0.044715, dtype=a.data.dtype)
    x = a.data
    x2 = x * x
    t = np.tanh(c * (x + k * x2 * x))  # x**3 spelled as muls: float pow is slow
    data = 0.5 * x * (1.0 + t)

    def backward(g):
        sech2 = 1.0 - t * t
        d = 0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * k * x2)
        a._accumulate(g * d)

    return _make(data, "gelu", (a,), backward)


def squared_error(a, b):
    """Elementwise (a - b)**2."""
    a = _lift(a)
    b = _lift(b, like=a)
    _check_same_dtype("squared_error", a, b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_error: shapes {a.shape} vs {b.shape}")
    diff = a.data - b.data
    data = diff * diff

    def backward(g):
        if a.requires_grad:
            a._accumulate(g * 2.0 * diff)
        if b.requires_grad:
            b._accumulate(g * -2.0 * diff)

    return _make(data, "squared_error", (a, b), backward)


# ---------------------------------------------------------------------------
# structural ops
# ---------------------------------------------------------------------------

def matmul(a, b):
    a = _lift(a)
    b = _lift(b, like=a)
    _check_same_dtype("matmul", a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must have rank >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims disagree, {a.shape} @ {b.shape}")

    # stacked-times-plain is the transformer hot path: collapse the stack
    # axes into one GEMM instead of looping BLAS over slices
    flat = a.ndim > 2 and b.ndim == 2
    if flat:
        k, n = b.shape
        data = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (n,))
    else:
        data = a.data @ b.data

    def backward(g):
        if flat:
            g2 = g.reshape(-1, b.shape[1])
            if a.requires_grad:
                a._accumulate((g2 @ b.data.T).reshape(a.shape))
            if b.requires_grad:
                b._accumulate(a.data.reshape(-1, a.shape[-1]).T @ g2)
        else:
            if a.requires_grad:
                a._accumulate(_unbroadcast(g @ b.data.swapaxes(-1, -2), a.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(a.data.swapaxes(-1, -2) @ g, b.shape))

    return _make(data, "matmul", (a, b), backward)


def transpose(a, axes=None):
    a = _lift(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def backward(g):
        a._accumulate(np.transpose(g, inverse))

    return _make(data, "transpose", (a,), backward)


def swapaxes(a, i, j):
    a = _lift(a)
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, axes)


def reshape(a, shape):
    a = _lift(a)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}") from None
    in_shape = a.shape

    def backward(g):
        a._accumulate(g.reshape(in_shape))

    return _make(data, "reshape", (a,), backward)


def broadcast_to(a, shape):
    a = _lift(a)
    try:
        data = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {shape}") from None
    in_shape = a.shape

    def backward(g):
        a._accumulate(_unbroadcast(g, in_shape))

    return _make(data, "broadcast_to", (a,), backward)


def concat(tensors, axis=0):
    tensors = [_lift(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: empty input list")
    _check_same_dtype("concat", *tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            f"concat: incompatible shapes {[t.shape for t in tensors]} along axis {axis}"
        ) from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        pieces = np.split(g, splits, axis=axis)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)

    return _make(data, "concat", tuple(tensors), backward)


def index(a, key):
    """Basic (slice/int/ellipsis) indexing; no duplicate reads, so backward
    writes into a zero array."""
    a = _lift(a)
    data = a.data[key]
    if not isinstance(data, np.ndarray):
        data = np.asarray(data)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        full[key] = g
        a._accumulate(full)

    return _make(data, "index", (a,), backward)


def gather(a, indices, axis, unique=False):
    """take_along_axis: out[..., i, ...] = a[..., indices[..., i, ...], ...].

    indices must broadcast against a's shape except on `axis`. Backward
    scatter-adds, so duplicate indices are supported. Pass unique=True only
    when each source element is selected at most once along the gather
    lanes (e.g. the indices are a permutation or subset); this switches the
    backward to a plain scatter, which is much faster than np.add.at.
    """
    a = _lift(a)
    indices = np.asarray(indices)
    if indices.ndim != a.ndim:
        raise ShapeError(
            f"gather: indices rank {indices.ndim} != operand rank {a.ndim}"
        )
    if indices.size and (indices.min() < 0 or indices.max() >= a.shape[axis]):
        raise ShapeError(
            f"gather: index out of range for axis {axis} with extent {a.shape[axis]}"
        )
    data = np.take_along_axis(a.data, indices, axis=axis)
    in_shape = a.shape

    def backward(g):
        full = np.zeros(in_shape, dtype=g.dtype)
        idx_b = np.broadcast_to(indices, g.shape)
        if unique:
            np.put_along_axis(full, idx_b, g, axis=axis)
        else:
            grids = list(np.ogrid[tuple(slice(0, n) for n in g.shape)])
            grids[axis] = idx_b
            np.add.at(full, tuple(grids), g)
        a._accumulate(full)

    return _make(data, "gather", (a,), backward)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def _reduce_backward_shape(in_shape, axis, keepdims):
    if axis is None:
        return (1,) * len(in_shape)
    axes = axis if isinstance(axis, tuple) else (axis,)
    axes = tuple(ax % len(in_shape) for ax in axes)
    if keepdims:
        return None  # grad already has singleton dims
    return tuple(1 if i in axes else n for i, n in enumerate(in_shape))


def tensor_sum(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.sum(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    gshape = _reduce_backward_shape(in_shape, axis, keepdims)

    def backward(g):
        if gshape is not None:
            g = g.reshape(gshape)
        a._accumulate(np.broadcast_to(g, in_shape).astype(g.dtype, copy=False))

    return _make(data, "sum", (a,), backward)


def mean(a, axis=None, keepdims=False):
    a = _lift(a)
    data = a.data.mean(axis=axis, keepdims=keepdims)
    in_shape = a.shape
    count = a.data.size if axis is None else np.prod(
        [in_shape[ax % len(in_shape)] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    gshape = _reduce_backward_shape(in_shape, axis, keepdims)

    def backward(g):
        if gshape is not None:
            g = g.reshape(gshape)
        a._accumulate(np.broadcast_to(g / count, in_shape).astype(g.dtype, copy=False))

    return _make(data, "mean", (a,), backward)


def softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return _make(data, "softmax", (a,), backward)


def log_softmax(a, axis=-1):
    a = _lift(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - lse
    sm = np.exp(data)

    def backward(g):
        a._accumulate(g - sm * g.sum(axis=axis, keepdims=True))

    return _make(data, "log_softmax", (a,), backward)


def layer_norm(x, gain=None, bias=None, eps=1e-5):
    """Normalize the last axis to zero mean / unit population variance,
    then optionally apply elementwise gain and bias."""
    x = _lift(x)
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.data.dtype))
    xhat = (x.data - mu) * inv
    parents = [x]
    data = xhat
    if gain is not None:
        gain = _lift(gain, like=x)
        _check_same_dtype("layer_norm", x, gain)
        if gain.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: gain shape {gain.shape} != ({x.shape[-1]},)")
        data = data * gain.data
        parents.append(gain)
    if bias is not None:
        bias = _lift(bias, like=x)
        _check_same_dtype("layer_norm", x, bias)
        if bias.shape != x.shape[-1:]:
            raise ShapeError(f"layer_norm: bias shape {bias.shape} != ({x.shape[-1]},)")
        data = data + bias.data
        parents.append(bias)

    n = x.shape[-1]
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g):
        gh = g * gain.data if gain is not None else g
        if x.requires_grad:
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gh - m1 - xhat * m2))
        if gain is not None and gain.requires_grad:
            gain._accumulate((g * xhat).sum(axis=reduce_axes))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=reduce_axes))

    return _make(data, "layer_norm", tuple(parents), backward)
