"""Dense numpy-backed tensors with reverse-mode automatic differentiation.

Operations record a closure per output node; ``backward`` replays the
closures in reverse creation order, which is a valid reverse topological
order of the recorded graph. A graph is consumable once: closures are
released as they run.
"""

from __future__ import annotations

import itertools

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class GraphError(RuntimeError):
    """Invalid use of a recorded graph (non-scalar loss, double backward)."""


_SEQ = itertools.count()


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode AD."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_backward", "_seq", "_consumed")

    def __init__(self, values, requires_grad=False):
        self.values = values if isinstance(values, np.ndarray) else np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._seq = next(_SEQ)
        self._consumed = False

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def size(self):
        return self.values.size

    @property
    def dtype(self):
        return self.values.dtype

    def item(self):
        return float(self.values)

    def __repr__(self):
        return f"Tensor(shape={self.values.shape}, requires_grad={self.requires_grad})"

    # operator sugar; constants stay python scalars so numpy keeps the dtype
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __rsub__(self, other):
        return sub(_wrap(other), self)

    def __mul__(self, other):
        return mul(self, _wrap(other))

    def __rmul__(self, other):
        return mul(_wrap(other), self)

    def __truediv__(self, other):
        return div(self, _wrap(other))

    def __rtruediv__(self, other):
        return div(_wrap(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other))

    def __getitem__(self, key):
        return take(self, key)


def _wrap(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(values, parents, backward_fn):
    """Build an output tensor, recording the adjoint only when needed."""
    tracked = tuple(p for p in parents if p.requires_grad)
    out = Tensor(values)
    if tracked:
        out.requires_grad = True
        out._parents = tracked
        out._backward = backward_fn
    return out


def _accumulate(t, g):
    if not t.requires_grad:
        return
    g = np.asarray(g)
    if g.dtype != t.values.dtype:
        g = g.astype(t.values.dtype)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _unbroadcast(g, shape):
    """Sum an adjoint back down to the shape it was broadcast from."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives

def add(a, b):
    a, b = _wrap(a), _wrap(b)
    out_values = a.values + b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(out_values, (a, b), backward_fn)


def sub(a, b):
    a, b = _wrap(a), _wrap(b)
    out_values = a.values - b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(out_values, (a, b), backward_fn)


def mul(a, b):
    a, b = _wrap(a), _wrap(b)
    out_values = a.values * b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g * b.values, a.shape))
        _accumulate(b, _unbroadcast(g * a.values, b.shape))

    return _node(out_values, (a, b), backward_fn)


def div(a, b):
    a, b = _wrap(a), _wrap(b)
    out_values = a.values / b.values

    def backward_fn(g):
        _accumulate(a, _unbroadcast(g / b.values, a.shape))
        _accumulate(b, _unbroadcast(-g * out_values / b.values, b.shape))

    return _node(out_values, (a, b), backward_fn)


def neg(a):
    def backward_fn(g):
        _accumulate(a, -g)

    return _node(-a.values, (a,), backward_fn)


def matmul(a, b):
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    out_values = a.values @ b.values

    def backward_fn(g):
        _accumulate(a, g @ b.values.T)
        _accumulate(b, a.values.T @ g)

    return _node(out_values, (a, b), backward_fn)


def concat(tensors, axis=0):
    tensors = [_wrap(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    out_values = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accumulate(t, g[tuple(sl)])

    return _node(out_values, tuple(tensors), backward_fn)


def take(a, key):
    """Index/slice; integer-array keys gather rows with a scatter-add adjoint."""
    out_values = a.values[key]
    fancy = isinstance(key, np.ndarray) or (
        isinstance(key, tuple) and any(isinstance(k, np.ndarray) for k in key)
    )

    def backward_fn(g):
        z = np.zeros_like(a.values)
        if fancy:
            np.add.at(z, key, g)
        else:
            z[key] += g
        _accumulate(a, z)

    return _node(out_values, (a,), backward_fn)


def reshape(a, shape):
    out_values = a.values.reshape(shape)

    def backward_fn(g):
        _accumulate(a, g.reshape(a.shape))

    return _node(out_values, (a,), backward_fn)


def tile_rows(a, n):
    """Repeat a single-row (1, D) tensor n times along axis 0."""
    if a.ndim != 2 or a.shape[0] != 1:
        raise ShapeError(f"tile_rows expects shape (1, D), got {a.shape}")
    out_values = np.repeat(a.values, n, axis=0)

    def backward_fn(g):
        _accumulate(a, g.sum(axis=0, keepdims=True))

    return _node(out_values, (a,), backward_fn)


def sin(a):
    out_values = np.sin(a.values)

    def backward_fn(g):
        _accumulate(a, g * np.cos(a.values))

    return _node(out_values, (a,), backward_fn)


def cos(a):
    out_values = np.cos(a.values)

    def backward_fn(g):
        _accumulate(a, -g * np.sin(a.values))

    return _node(out_values, (a,), backward_fn)


def exp(a):
    out_values = np.exp(a.values)

    def backward_fn(g):
        _accumulate(a, g * out_values)

    return _node(out_values, (a,), backward_fn)


def sqrt(a):
    out_values = np.sqrt(a.values)

    def backward_fn(g):
        _accumulate(a, g * (0.5 / out_values))

    return _node(out_values, (a,), backward_fn)


def absolute(a):
    out_values = np.abs(a.values)

    def backward_fn(g):
        _accumulate(a, g * np.sign(a.values))

    return _node(out_values, (a,), backward_fn)


def relu(a):
    out_values = np.maximum(a.values, 0)

    def backward_fn(g):
        _accumulate(a, g * (a.values > 0))

    return _node(out_values, (a,), backward_fn)


def leaky_relu(a, slope=0.2):
    out_values = np.where(a.values > 0, a.values, slope * a.values)

    def backward_fn(g):
        _accumulate(a, g * np.where(a.values > 0, 1.0, slope))

    return _node(out_values, (a,), backward_fn)


def softmax(a, axis=-1):
    if a.shape[axis if axis >= 0 else a.ndim + axis] == 0:
        raise ShapeError("softmax over an empty axis")
    shifted = a.values - a.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_values = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        inner = (g * out_values).sum(axis=axis, keepdims=True)
        _accumulate(a, out_values * (g - inner))

    return _node(out_values, (a,), backward_fn)


def reduce_sum(a, axis=None, keepdims=False):
    out_values = a.values.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(out_values, (a,), backward_fn)


def reduce_mean(a, axis=None, keepdims=False):
    out_values = a.values.mean(axis=axis, keepdims=keepdims)
    count = a.size if axis is None else a.shape[axis]

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape) / count)

    return _node(out_values, (a,), backward_fn)


def reduce_max(a, axis=None, keepdims=False):
    """Max reduction; the adjoint flows to the first maximal entry only."""
    out_values = a.values.max(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        z = np.zeros_like(a.values)
        if axis is None:
            idx = np.unravel_index(np.argmax(a.values), a.shape)
            z[idx] = g
        else:
            am = np.expand_dims(np.argmax(a.values, axis=axis), axis)
            gg = g if keepdims else np.expand_dims(g, axis)
            np.put_along_axis(z, am, gg, axis=axis)
        _accumulate(a, z)

    return _node(out_values, (a,), backward_fn)


def neighbor_interp(weights, feats, idx):
    """Weighted sum of neighbor feature rows: out[j] = sum_k w[j,k] * feats[idx[j,k]].

    weights: (M, k) tensor, feats: (N, F) tensor, idx: constant (M, k) int array.
    Implemented through a sparse (M, N) matrix so forward and adjoint both run
    at C speed; semantically identical to gather + multiply + sum.
    """
    import scipy.sparse as _sp

    weights, feats = _wrap(weights), _wrap(feats)
    if weights.shape != idx.shape:
        raise ShapeError(f"weights {weights.shape} vs neighbor index table {idx.shape}")
    m, k = idx.shape
    n = feats.shape[0]
    rows = np.repeat(np.arange(m), k)
    mat = _sp.csr_matrix((weights.values.ravel(), (rows, idx.ravel())), shape=(m, n))
    out_values = mat @ feats.values

    def backward_fn(g):
        if feats.requires_grad:
            _accumulate(feats, mat.T @ g)
        if weights.requires_grad:
            dw = np.empty_like(weights.values)
            fv = feats.values
            for col in range(k):
                dw[:, col] = np.einsum("mf,mf->m", g, fv[idx[:, col]])
            _accumulate(weights, dw)

    return _node(out_values, (weights, feats), backward_fn)


# ---------------------------------------------------------------------------
# composed operations

def l1_distance(a, b):
    """Sum of absolute componentwise differences (a scalar tensor)."""
    return reduce_sum(absolute(sub(a, b)))


def l2_norm(a, axis=None):
    return sqrt(reduce_sum(mul(a, a), axis=axis))


def cosine_similarity(a, b, axis=-1):
    dot = reduce_sum(mul(a, b), axis=axis)
    return div(dot, mul(l2_norm(a, axis=axis), l2_norm(b, axis=axis)))


# ---------------------------------------------------------------------------
# backward pass and verification

def backward(loss):
    """Accumulate dLoss/dX into every tracked tensor reachable from loss.

    Visits recorded nodes in reverse creation order exactly once and
    releases their closures; a second call on the same loss raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphError("backward already ran on this graph")
    order = []
    seen = set()
    stack = [loss]
    while stack:
        t = stack.pop()
        if id(t) in seen:
            continue
        seen.add(id(t))
        order.append(t)
        stack.extend(t._parents)
    order.sort(key=lambda t: t._seq, reverse=True)

    loss.grad = np.ones_like(loss.values)
    for t in order:
        if t._backward is not None:
            t._backward(t.grad)
            t._backward = None
            if t is not loss:
                t.grad = None
    loss._consumed = True


def grad_check(f, point, h=1e-5):
    """Max relative error between the recorded gradient of f at point and
    central finite differences with step h.

    f must map one tensor to a scalar tensor; evaluate in float64.
    """
    x = Tensor(np.array(point, dtype=np.float64), requires_grad=True)
    y = f(x)
    if y.size != 1:
        raise GraphError(f"grad_check needs a scalar function, got shape {y.shape}")
    backward(y)
    analytic = x.grad.ravel().copy()

    flat = x.values.ravel()
    fd = np.empty_like(flat)
    probe = Tensor(x.values)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(probe).values)
        flat[i] = orig - h
        fm = float(f(probe).values)
        flat[i] = orig
        fd[i] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(analytic - fd) / (np.abs(analytic) + 1e-8)))
