"""Dense float64 tensors with reverse-mode autodiff, plus Adam.

Only the primitives the VAE and mixture priors need are provided.  Binary
elementwise ops follow numpy broadcasting; gradients are summed back onto
the broadcast operand's shape.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

__all__ = [
    "Tensor", "ShapeError", "CholeskyError", "ParamStore", "AdamState",
    "value_and_grad", "adam_step", "cholesky",
    "add", "sub", "mul", "div", "neg", "matmul", "matvec", "relu", "softplus",
    "sigmoid", "tanh", "exp", "log", "square", "sqrt", "gammaln", "sum",
    "logsumexp", "softmax", "log_softmax", "reshape", "transpose",
]


class ShapeError(ValueError):
    """Raised when an op receives operands with incompatible shapes."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {', '.join(map(str, self.shapes))}")


class CholeskyError(np.linalg.LinAlgError):
    def __init__(self, minor, index=None):
        self.minor = minor
        self.index = index
        where = "" if index is None else f" (matrix {index})"
        super().__init__(f"matrix is not positive definite: leading minor of order {minor} fails{where}")


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def __float__(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

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

    def __getitem__(self, idx):
        return _getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self, grad=None):
        backward(self, grad)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _value(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def _make(data, parents, backward_fn):
    parents = tuple(p for p in parents if p.requires_grad)
    if not parents:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(root, grad=None):
    if not root.requires_grad:
        return
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    root.grad = np.ones_like(root.data) if grad is None else np.asarray(grad, dtype=np.float64)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("add", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))
    return _make(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("sub", a, b)

    def bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))
    return _make(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("mul", a, b)

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))
    return _make(a.data * b.data, (a, b), bw)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * out / b.data, b.shape))
    return _make(out, (a, b), bw)


def neg(a):
    a = _wrap(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def _unary(a, fwd, dfn):
    a = _wrap(a)
    out = fwd(a.data)
    return _make(out, (a,), lambda g: _accumulate(a, g * dfn(a.data, out)))


def relu(a):
    return _unary(a, lambda x: np.maximum(x, 0.0), lambda x, y: (x > 0).astype(np.float64))


def softplus(a):
    return _unary(a, lambda x: np.logaddexp(0.0, x), lambda x, y: special.expit(x))


def sigmoid(a):
    return _unary(a, special.expit, lambda x, y: y * (1.0 - y))


def tanh(a):
    return _unary(a, np.tanh, lambda x, y: 1.0 - y * y)


def exp(a):
    return _unary(a, np.exp, lambda x, y: y)


def log(a):
    return _unary(a, np.log, lambda x, y: 1.0 / x)


def square(a):
    return _unary(a, np.square, lambda x, y: 2.0 * x)


def sqrt(a):
    return _unary(a, np.sqrt, lambda x, y: 0.5 / y)


def gammaln(a):
    return _unary(a, special.gammaln, lambda x, y: special.digamma(x))


# ----------------------------------------------------------------- reductions

def sum(a, axis=None, keepdims=False):
    a = _wrap(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))
    return _make(out, (a,), bw)


def logsumexp(a, axis=-1, keepdims=False):
    """Numerically stable log-sum-exp along ``axis``."""
    a = _wrap(a)
    if a.data.size == 0 or (a.ndim and a.shape[axis] == 0):
        raise ValueError("logsumexp of an empty vector")
    m = np.max(a.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m)
    tot = s.sum(axis=axis, keepdims=True)
    out_k = m + np.log(tot)
    out = out_k if keepdims else np.squeeze(out_k, axis=axis)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, g * (s / tot))
    return _make(out, (a,), bw)


def softmax(a, axis=-1):
    a = _wrap(a)
    out = special.softmax(a.data, axis=axis)

    def bw(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))
    return _make(out, (a,), bw)


def log_softmax(a, axis=-1):
    a = _wrap(a)
    out = special.log_softmax(a.data, axis=axis)

    def bw(g):
        _accumulate(a, g - np.exp(out) * g.sum(axis=axis, keepdims=True))
    return _make(out, (a,), bw)


# -------------------------------------------------------------- shape / linalg

def reshape(a, shape):
    a = _wrap(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, shape) from None
    return _make(out, (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def transpose(a):
    """Swap the last two axes."""
    a = _wrap(a)
    return _make(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: _accumulate(a, np.swapaxes(g, -1, -2)))


def _getitem(a, idx):
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        _accumulate(a, full)
    return _make(out, (a,), bw)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape))
    return _make(out, (a, b), bw)


def matvec(A, v):
    """Batched matrix-vector product ``A[..., :, :] @ v[..., :]``.

    Used for triangular factors (precision Choleskys and inverse covariance
    factors); leading axes broadcast.
    """
    A, v = _wrap(A), _wrap(v)
    if A.ndim < 2 or v.ndim < 1 or A.shape[-1] != v.shape[-1]:
        raise ShapeError("matvec", A.shape, v.shape)
    return reshape(matmul(A, reshape(v, v.shape + (1,))), np.broadcast_shapes(
        A.shape[:-2], v.shape[:-1]) + (A.shape[-2],))


def cholesky(A):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Accepts a stack of matrices (..., p, p).  Not differentiable; callers use
    it only on constants.
    """
    A = np.array(_value(A), dtype=np.float64)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ShapeError("cholesky", A.shape)
    p = A.shape[-1]
    batch = A.shape[:-2]
    A = A.reshape((-1, p, p))
    L = np.zeros_like(A)
    for j in range(p):
        d = A[:, j, j] - np.einsum("bk,bk->b", L[:, j, :j], L[:, j, :j])
        bad = ~(d > 0)
        if bad.any():
            idx = int(np.argmax(bad))
            raise CholeskyError(j + 1, idx if batch else None)
        L[:, j, j] = np.sqrt(d)
        if j + 1 < p:
            off = A[:, j + 1:, j] - np.einsum("bik,bk->bi", L[:, j + 1:, :j], L[:, j, :j])
            L[:, j + 1:, j] = off / L[:, j, j][:, None]
    return L.reshape(batch + (p, p))


# ------------------------------------------------------------ params and Adam

@dataclass
class _Entry:
    value: np.ndarray
    trainable: bool = True


class ParamStore:
    """Named float64 arrays, each flagged trainable or frozen."""

    def __init__(self, entries=None):
        self._entries = {}
        for name, value in (entries or {}).items():
            self.add(name, value)

    def add(self, name, value, trainable=True):
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._entries[name] = _Entry(np.array(value, dtype=np.float64), bool(trainable))

    def __getitem__(self, name):
        return self._entries[name].value

    def __setitem__(self, name, value):
        entry = self._entries[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != entry.value.shape:
            raise ShapeError("ParamStore.__setitem__", entry.value.shape, value.shape)
        entry.value = value.copy()

    def __contains__(self, name):
        return name in self._entries

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def items(self):
        return [(k, e.value) for k, e in self._entries.items()]

    def is_trainable(self, name):
        return self._entries[name].trainable

    def set_trainable(self, name, flag):
        self._entries[name].trainable = bool(flag)

    def trainable_names(self):
        return [k for k, e in self._entries.items() if e.trainable]

    def copy(self):
        out = ParamStore()
        for k, e in self._entries.items():
            out.add(k, e.value, e.trainable)
        return out

    def frozen(self):
        out = self.copy()
        for k in out:
            out.set_trainable(k, False)
        return out

    def merged(self, *others, freeze_others=False):
        """A combined view; writes through to the source stores.

        With ``freeze_others`` the entries of ``others`` appear non-trainable.
        """
        out = ParamStore()
        out._entries.update(self._entries)
        for other in others:
            for k, e in other._entries.items():
                if k in out._entries:
                    raise KeyError(f"duplicate parameter name {k!r}")
                out._entries[k] = _Entry(e.value, False) if freeze_others else e
        return out

    def update_from(self, other):
        for k in other:
            if k in self._entries:
                self[k] = other[k]


def value_and_grad(objective, params, *inputs):
    """Evaluate a scalar objective and its gradient wrt trainable params.

    ``objective(view, *inputs)`` receives a dict name -> Tensor.  Returns the
    float value and a dict of gradients keyed by trainable name.
    """
    view = {k: Tensor(params[k], requires_grad=params.is_trainable(k)) for k in params}
    out = objective(view, *inputs)
    out = _wrap(out)
    if out.data.size != 1:
        raise ShapeError("value_and_grad", out.shape, ())
    backward(out)
    grads = {}
    for k in params.trainable_names():
        g = view[k].grad
        grads[k] = np.zeros_like(params[k]) if g is None else g.reshape(params[k].shape)
    return float(out.data), grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One bias-corrected Adam descent step, in place on ``params``."""
    for name, g in grads.items():
        if name not in params or not params.is_trainable(name):
            raise KeyError(f"gradient for non-trainable or unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        params[name] = params[name] - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state
