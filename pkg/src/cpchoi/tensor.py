"""A small define-by-run reverse-mode autodiff engine on float64 numpy arrays.

Operations executed inside a ``Tape`` context are recorded when at least one
input requires a gradient.  ``backward`` walks the tape in reverse id order
(which is a topological order by construction) and accumulates gradients.

    >>> w = Tensor([2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = (w * 3.0).sum()
    ...     tape.backward(loss)
    >>> tape.grad(w)
    array([3.])
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from . import _kernels as K

LAYERNORM_EPS = 1e-5


class TensorError(ValueError):
    """Shape, domain or graph misuse."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


_local = threading.local()


def _tapes():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    stack = _tapes()
    return stack[-1] if stack else None


@dataclass
class Node:
    kind: str
    inputs: tuple
    backward: Callable | None
    shape: tuple


@dataclass
class Tape:
    """Append-only record of one forward pass.

    ``trace`` lists the kind of every operation executed while the tape is
    active, tracked or not, which makes it usable as an operation audit.
    """

    nodes: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    grads: dict = field(default_factory=dict)

    def __post_init__(self):
        self._leaves = {}

    def __enter__(self):
        _tapes().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tapes()
        if not stack or stack[-1] is not self:
            raise TensorError("tape stack corrupted")
        stack.pop()
        return False

    def _add(self, kind, inputs, backward, shape):
        self.nodes.append(Node(kind, inputs, backward, shape))
        return len(self.nodes) - 1

    def node_of(self, t: Tensor) -> int:
        if t._tape is self:
            return t.node_id
        key = id(t)
        hit = self._leaves.get(key)
        if hit is not None:
            return hit[0]
        nid = self._add("leaf", (), None, t.data.shape)
        # keep a reference so id() stays valid for the tape's lifetime
        self._leaves[key] = (nid, t)
        return nid

    def backward(self, root: Tensor):
        if not root.requires_grad or root._tape is not self:
            raise TensorError("backward root is not tracked on this tape")
        if root.data.size != 1:
            raise TensorError(f"backward root must be a scalar, got shape {root.shape}")
        grads = [None] * len(self.nodes)
        grads[root.node_id] = np.ones_like(root.data)
        for nid in range(root.node_id, -1, -1):
            g = grads[nid]
            if g is None:
                continue
            node = self.nodes[nid]
            if node.backward is None:
                continue
            for inp, gi in zip(node.inputs, node.backward(g)):
                if inp < 0 or gi is None:
                    continue
                grads[inp] = gi if grads[inp] is None else grads[inp] + gi
        self.grads = {i: g for i, g in enumerate(grads) if g is not None}
        return self.grads

    def grad(self, t: Tensor) -> np.ndarray:
        """Gradient of the last backward root w.r.t. ``t`` (zeros if unreached)."""
        if t._tape is self:
            nid = t.node_id
        else:
            hit = self._leaves.get(id(t))
            nid = None if hit is None else hit[0]
        g = self.grads.get(nid) if nid is not None else None
        return np.zeros_like(t.data) if g is None else g


class Tensor:
    __slots__ = ("data", "requires_grad", "node_id", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node_id = None
        self._tape = None

    @classmethod
    def _wrap(cls, arr):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.node_id = None
        t._tape = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor._wrap(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __len__(self):
        return len(self.data)

    # operators
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _finite(arr, kind):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{kind} produced NaN or Inf")
    return arr


def _record(kind, out, inputs: Sequence[Tensor], backward):
    """Wrap ``out`` and, when a tape is active and any input is tracked, add a node."""
    _finite(out, kind)
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is None:
        return t
    tape.trace.append(kind)
    if any(x.requires_grad for x in inputs):
        ids = tuple(tape.node_of(x) if x.requires_grad else -1 for x in inputs)
        t.node_id = tape._add(kind, ids, backward, out.shape)
        t._tape = tape
        t.requires_grad = True
    return t


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a, b, kind):
    # trailing-dimension broadcasting only
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise TensorError(f"{kind}: shapes {a} and {b} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "add")
    sa, sb = a.shape, b.shape
    return _record("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "sub")
    sa, sb = a.shape, b.shape
    return _record("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "mul")
    ad, bd = a.data, b.data
    return _record("mul", ad * bd, (a, b),
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "div")
    if np.any(b.data == 0):
        raise TensorError("div: division by zero")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _record("div", out, (a, b), backward)


def neg(a):
    a = as_tensor(a)
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise TensorError("log: non-positive input")
    ad = a.data
    return _record("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a):
    a = as_tensor(a)
    out = expit(a.data)
    return _record("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def softplus(a):
    """log(1 + exp(a)), differentiable everywhere."""
    a = as_tensor(a)
    ad = a.data
    return _record("softplus", np.logaddexp(0.0, ad), (a,), lambda g: (g * expit(ad),))


def absolute(a):
    a = as_tensor(a)
    sign = np.sign(a.data)
    return _record("abs", np.abs(a.data), (a,), lambda g: (g * sign,))


def square(a):
    a = as_tensor(a)
    ad = a.data
    return _record("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def maximum(a, b):
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "maximum")
    pick = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _record("maximum", np.where(pick, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick, sa), _unbroadcast(g * ~pick, sb)))


def minimum(a, b):
    """Elementwise min; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a.shape, b.shape, "minimum")
    pick = a.data <= b.data
    sa, sb = a.shape, b.shape
    return _record("minimum", np.where(pick, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * pick, sa), _unbroadcast(g * ~pick, sb)))


_UNARY = {"neg": neg, "exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid,
          "softplus": softplus, "abs": absolute, "square": square}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div, "maximum": maximum, "minimum": minimum}


def elementwise(op_kind: str, a, b=None) -> Tensor:
    if op_kind in _BINARY:
        if b is None:
            raise TensorError(f"{op_kind} needs two operands")
        return _BINARY[op_kind](a, b)
    if op_kind in _UNARY:
        return _UNARY[op_kind](a)
    raise TensorError(f"unknown elementwise op {op_kind!r}")


# ---------------------------------------------------------------------------
# linear algebra, normalisation
# ---------------------------------------------------------------------------


def matmul(a, b):
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record("matmul", ad @ bd, (a, b), backward)


def _rows(x, axis):
    """Move ``axis`` last and flatten to a C-contiguous (rows, width) array."""
    moved = np.moveaxis(x, axis, -1)
    return np.ascontiguousarray(moved).reshape(-1, x.shape[axis]), moved.shape


def _unrows(r, moved_shape, axis):
    return np.moveaxis(r.reshape(moved_shape), -1, axis)


def softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    x, moved = _rows(a.data, axis)
    y = K.softmax_fwd(x)

    def backward(g):
        gr, _ = _rows(g, axis)
        return (_unrows(K.softmax_bwd(y, gr), moved, axis),)

    return _record("softmax", _unrows(y, moved, axis), (a,), backward)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    x, moved = _rows(a.data, axis)
    y = K.log_softmax_fwd(x)

    def backward(g):
        gr, _ = _rows(g, axis)
        return (_unrows(K.log_softmax_bwd(y, gr), moved, axis),)

    return _record("log_softmax", _unrows(y, moved, axis), (a,), backward)


def layernorm(a, gamma, beta, eps=LAYERNORM_EPS):
    a, gamma, beta = as_tensor(a), as_tensor(gamma), as_tensor(beta)
    width = a.shape[-1]
    if gamma.shape != (width,) or beta.shape != (width,):
        raise TensorError(f"layernorm: gamma/beta must have shape ({width},)")
    if eps <= 0:
        raise TensorError("layernorm: eps must be positive")
    shape = a.shape
    x = np.ascontiguousarray(a.data).reshape(-1, width)
    gd = gamma.data
    y, xhat, rstd = K.layernorm_fwd(x, gd, beta.data, eps)

    def backward(g):
        dx, dgamma, dbeta = K.layernorm_bwd(np.ascontiguousarray(g).reshape(-1, width), xhat, rstd, gd)
        return dx.reshape(shape), dgamma, dbeta

    return _record("layernorm", y.reshape(shape), (a, gamma, beta), backward)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _check_axis(a, axis):
    if axis is None:
        return None
    if isinstance(axis, tuple):
        return tuple(_check_axis(a, ax) for ax in axis)
    if not -a.ndim <= axis < max(a.ndim, 1):
        raise TensorError(f"axis {axis} out of range for shape {a.shape}")
    return axis % a.ndim if a.ndim else 0


def reduce(op_kind: str, a, axis=None, keepdims=False):
    a = as_tensor(a)
    axis = _check_axis(a, axis)
    shape = a.shape
    if op_kind == "sum":
        out = a.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

    elif op_kind == "mean":
        count = a.data.size if axis is None else int(np.prod([shape[i] for i in np.atleast_1d(axis)]))
        out = a.data.mean(axis=axis, keepdims=keepdims)

        def backward(g):
            if not keepdims and axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / count, shape).copy(),)

    elif op_kind == "max":
        if isinstance(axis, tuple):
            raise TensorError("max reduces over a single axis or everything")
        if axis is None:
            flat = int(np.argmax(a.data))  # first index on ties
            out = a.data.reshape(-1)[flat]
            if keepdims:
                out = out.reshape((1,) * a.ndim)

            def backward(g):
                z = np.zeros(a.data.size)
                z[flat] = g.reshape(-1)[0]
                return (z.reshape(shape),)

        else:
            idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
            out = np.take_along_axis(a.data, idx, axis)
            if not keepdims:
                out = np.squeeze(out, axis)

            def backward(g):
                if not keepdims:
                    g = np.expand_dims(g, axis)
                z = np.zeros(shape)
                np.put_along_axis(z, idx, g, axis)
                return (z,)

    else:
        raise TensorError(f"unknown reduction {op_kind!r}")
    return _record(op_kind, np.asarray(out, dtype=np.float64), (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise TensorError(f"cannot reshape {old} to {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record("transpose", np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def getitem(a, index):
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    a = as_tensor(a)
    shape = a.shape
    out = a.data[index]
    basic = all(isinstance(i, (slice, int, type(Ellipsis), type(None)))
                for i in (index if isinstance(index, tuple) else (index,)))

    def backward(g):
        z = np.zeros(shape)
        if basic:
            z[index] = g
        else:
            np.add.at(z, index, g)
        return (z,)

    return _record("getitem", np.array(out, dtype=np.float64), (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    axis = _check_axis(tensors[0], axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _record("concat", out, tensors, lambda g: tuple(np.split(g, sizes, axis=axis)))


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def rel_error(analytic, numeric, floor=1e-6):
    """Entrywise |a-n| / max(|a|, |n|, floor)."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck(fn, inputs, h=1e-5, entries=None, rng=None):
    """Compare reverse-mode gradients of scalar ``fn(*inputs)`` with central differences.

    ``entries`` limits the check to that many randomly sampled coordinates per
    input (all coordinates when None).  Returns the maximum relative error.
    """
    inputs = list(inputs)
    with Tape() as tape:
        out = fn(*inputs)
        tape.backward(out)
    analytic = [tape.grad(x).copy() for x in inputs]
    rng = np.random.default_rng(0) if rng is None else rng
    worst = 0.0
    for x, ga in zip(inputs, analytic):
        flat = x.data.reshape(-1)
        if entries is None or entries >= flat.size:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=entries, replace=False)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + h
            up = float(fn(*inputs).data)
            flat[c] = orig - h
            down = float(fn(*inputs).data)
            flat[c] = orig
            numeric = (up - down) / (2 * h)
            worst = max(worst, float(rel_error(ga.reshape(-1)[c], numeric)))
    return worst
