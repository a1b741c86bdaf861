"""Reverse-mode automatic differentiation over numpy arrays.

A ``Tensor`` wraps an ndarray. Every differentiable operation returns a new
tensor holding references to its inputs and a closure mapping the output
gradient to input gradients. ``Tensor.backward`` walks that graph in reverse
topological order (the tape) and accumulates into the ``grad`` buffers of leaf
tensors that require gradients.

Default precision is float32; wrap gradient checks in ``default_dtype(np.float64)``.
"""

from contextlib import contextmanager

import numpy as np

from . import kernels

_state = {"dtype": np.dtype(np.float32), "grad": True}


def get_default_dtype():
    return _state["dtype"]


def set_default_dtype(dtype):
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported default dtype {dtype}")
    _state["dtype"] = dtype


@contextmanager
def default_dtype(dtype):
    prev = _state["dtype"]
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def is_grad_enabled():
    return _state["grad"]


def _to_array(data, dtype=None):
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(_state["dtype"])
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        self.data = _to_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._parents = ()
        self._backward = None
        self.name = name

    # ------------------------------------------------------------------
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
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def astype(self, dtype):
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    # ------------------------------------------------------------------
    def tape(self):
        """Nodes reachable from ``self`` that carry gradient, inputs first."""
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in reversed(node._parents):
                if id(parent) not in seen:
                    stack.append((parent, False))
        return order

    def backward(self):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            return
        pending = {id(self): np.ones_like(self.data)}
        for node in reversed(self.tape()):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                g = g.astype(node.data.dtype, copy=False)
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                pending[key] = pending[key] + pg if key in pending else pg

    # ------------------------------------------------------------------
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

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a, b):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def record(data, parents, backward):
    """Build an op output. ``backward(g)`` returns one gradient (or None) per parent."""
    out = Tensor(data)
    if _state["grad"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------

def _binary_pair(a, b):
    if not isinstance(a, Tensor):
        a = as_tensor(a, like=b)
    if not isinstance(b, Tensor):
        b = as_tensor(b, like=a)
    return a, b


def add(a, b):
    a, b = _binary_pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), backward)


def sub(a, b):
    a, b = _binary_pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), backward)


def mul(a, b):
    a, b = _binary_pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data * b.data, (a, b), backward)


def div(a, b):
    a, b = _binary_pair(a, b)

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.data / b.data, (a, b), backward)


def power(x, exponent):
    if isinstance(exponent, Tensor):
        raise TypeError("only constant exponents are supported")
    p = float(exponent)

    def backward(g):
        return (g * p * x.data ** (p - 1.0),)

    return record(x.data ** p, (x,), backward)


def exp(x):
    out = np.exp(x.data)
    return record(out, (x,), lambda g: (g * out,))


def log(x):
    return record(np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x):
    out = np.tanh(x.data)
    return record(out, (x,), lambda g: (g * (1.0 - out * out),))


def sigmoid(x):
    out = _sigmoid(x.data)
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def relu(x):
    mask = x.data > 0
    return record(x.data * mask, (x,), lambda g: (g * mask,))


def gelu(x):
    """x * Phi(x) with the exact Gaussian CDF."""
    out = kernels.gelu_forward(x.data)
    return record(out, (x,), lambda g: (g * kernels.gelu_grad(x.data),))


# --------------------------------------------------------------------------
# reductions and shape ops
# --------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    axes = _norm_axes(axis, x.ndim)
    count = 1
    for a in axes:
        count *= x.shape[a]
    return tsum(x, axes, keepdims) * (1.0 / count)


def reshape(x, shape):
    out = x.data.reshape(shape)
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    out = x.data.transpose(axes)
    return record(out, (x,), lambda g: (g.transpose(inverse),))


def _index_arrays(index):
    if isinstance(index, tuple):
        return tuple(i.data.astype(np.int64) if isinstance(i, Tensor) else i for i in index)
    if isinstance(index, Tensor):
        return index.data.astype(np.int64)
    return index


def getitem(x, index):
    index = _index_arrays(index)
    out = x.data[index]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, index, g)
        return (gx,)

    return record(np.array(out, copy=True), (x,), backward)


def concat(tensors, axis=0):
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return record(out, tensors, backward)


def broadcast_to(x, shape):
    out = np.broadcast_to(x.data, shape).copy()
    return record(out, (x,), lambda g: (unbroadcast(g, x.shape),))


# --------------------------------------------------------------------------
# linear algebra
# --------------------------------------------------------------------------

def matmul(a, b):
    a, b = _binary_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape} (inner {a.shape[-1]} != {b.shape[-2]})")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return record(out, (a, b), backward)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as (out_features, in_features)."""
    if x.shape[-1] != weight.shape[1]:
        raise ValueError(f"linear: input features {x.shape[-1]} != weight in_features {weight.shape[1]}")
    out = np.matmul(x.data, weight.data.T)
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = np.matmul(g, weight.data) if x.requires_grad else None
        gw = np.matmul(g2.T, x.data.reshape(-1, x.shape[-1])) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return record(out, parents, backward)


# --------------------------------------------------------------------------
# normalisation / probability
# --------------------------------------------------------------------------

def softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (x,), backward)


def log_softmax(x, axis=-1):
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (x,), backward)


def layer_norm(x, gamma, beta, eps=1e-6):
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty last dimension")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ValueError(f"layer_norm affine shape mismatch: x[..., {d}] vs gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        ggamma = (g * xhat).sum(axis=lead) if gamma.requires_grad else None
        gbeta = g.sum(axis=lead) if beta.requires_grad else None
        return gx, ggamma, gbeta

    return record(out, (x, gamma, beta), backward)


def bce_with_logits(logits, targets):
    """Elementwise binary cross-entropy on raw logits (numerically stable)."""
    z = logits.data
    y = targets.data if isinstance(targets, Tensor) else np.asarray(targets, dtype=z.dtype)
    zy = np.where(y == 0, 0.0, z * y)
    out = np.maximum(z, 0.0) - zy + np.log1p(np.exp(-np.abs(z)))
    out = out.astype(z.dtype, copy=False)

    def backward(g):
        return (g * (_sigmoid(z) - y),)

    return record(out, (logits,), backward)


# --------------------------------------------------------------------------
# finite-difference oracle
# --------------------------------------------------------------------------

def numeric_grad(f, x, eps=1e-5, order=2):
    """Central differences of scalar ``f`` at float64 array ``x``.

    ``order=2`` is the two-point stencil; ``order=4`` the five-point stencil
    (truncation O(eps^4)), which tolerates a larger ``eps`` and so less
    rounding noise on small gradient entries.
    """
    if order == 2:
        stencil = ((1.0, 0.5), (-1.0, -0.5))
    elif order == 4:
        stencil = ((-2.0, 1.0 / 12), (-1.0, -8.0 / 12), (1.0, 8.0 / 12), (2.0, -1.0 / 12))
    else:
        raise ValueError("order must be 2 or 4")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            total = 0.0
            for step, weight in stencil:
                flat[i] = orig + step * eps
                val = f(Tensor(x.copy())).data
                if np.size(val) != 1:
                    raise ValueError("grad_check needs a scalar-valued function")
                total += weight * float(val)
            flat[i] = orig
            gflat[i] = total / eps
    return grad


def grad_check(f, x, eps=1e-5, order=2):
    """Max relative error between backprop and central differences.

    ``f`` maps a Tensor to a scalar Tensor. Runs in float64.
    """
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with default_dtype(np.float64):
        xt = Tensor(x.copy(), requires_grad=True)
        out = f(xt)
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        out.backward()
        analytic = xt.grad
        numeric = numeric_grad(f, x, eps, order)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom))
