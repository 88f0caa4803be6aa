"""Small reverse-mode autodiff engine over numpy arrays.

Only the operations the polarizer networks and losses need are provided.
Every op is a free function returning a new :class:`Tensor`; the graph is
recorded implicitly through parent links and a monotone creation id, so the
backward pass is a single sweep in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

from . import kernels

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

_state = threading.local()
_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


def _get(name, default):
    return getattr(_state, name, default)


def default_dtype():
    return _get("dtype", np.float32)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype new tensors are created with."""
    prev = default_dtype()
    _state.dtype = np.dtype(dtype).type
    try:
        yield
    finally:
        _state.dtype = prev


def grad_enabled():
    return _get("grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


def _check(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")
    return data


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_id", "op")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.array(data, dtype=dtype or default_dtype(), copy=True)
        self.data = _check(arr, "tensor")
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._id = next(_ids)
        self.op = "leaf"

    @classmethod
    def _result(cls, data, parents, backward, op):
        out = cls.__new__(cls)
        out.data = _check(data, op)
        out.grad = None
        out._id = next(_ids)
        out.op = op
        track = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    def __getstate__(self):
        return {k: getattr(self, k) for k in self.__slots__ if k != "_id"}

    def __setstate__(self, state):
        for k, v in state.items():
            setattr(self, k, v)
        # copies and unpickled tensors get a fresh creation id; reusing the old
        # one could collide with tensors already created in this process
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return not self._parents

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data):
    return Tensor(data, requires_grad=True)


def backward(root):
    """Accumulate d(root)/d(leaf) into ``.grad`` of every reachable leaf."""
    if root.data.size != 1 or root.data.ndim != 0:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        return
    nodes = {}
    stack = [root]
    while stack:
        t = stack.pop()
        if t._id in nodes:
            continue
        nodes[t._id] = t
        stack.extend(p for p in t._parents if p.requires_grad)
    # creation order is a topological order, so reverse id order visits every
    # node after all of its consumers
    grads = {root._id: np.ones_like(root.data)}
    for tid in sorted(nodes, reverse=True):
        t = nodes[tid]
        g = grads.pop(tid, None)
        if g is None:
            continue
        if t.is_leaf:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        for p, pg in zip(t._parents, t._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            grads[p._id] = grads[p._id] + pg if p._id in grads else pg


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# elementwise ---------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "add")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "sub")
    return Tensor._result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _same_shape(a, b, "mul")
    return Tensor._result(a.data * b.data, (a, b),
                          lambda g: (g * b.data, g * a.data), "mul")


def scale(a, c, shift=0.0):
    """``c * a + shift`` for python scalars ``c`` and ``shift``."""
    c = float(c)
    return Tensor._result(a.data * a.data.dtype.type(c) + a.data.dtype.type(shift),
                          (a,), lambda g: (g * g.dtype.type(c),), "scale")


def relu(a):
    mask = a.data > 0
    return Tensor._result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def log(a, floor=None):
    """Natural log; with ``floor`` the argument is clamped from below first.

    Clamped entries receive zero gradient.
    """
    x = a.data
    if floor is not None:
        live = x > floor
        x = np.where(live, x, x.dtype.type(floor))
    else:
        live = None
    out = np.log(x)

    def bw(g):
        d = g / x
        return (d * live if live is not None else d,)

    return Tensor._result(out, (a,), bw, "log")


def add_bias(a, b):
    """Add a per-channel vector ``b`` along axis 1 of ``a``."""
    if b.ndim != 1 or b.shape[0] != a.shape[1]:
        raise ValueError(f"add_bias: bias {b.shape} does not match channels of {a.shape}")
    view = (1, -1) + (1,) * (a.ndim - 2)
    axes = (0,) + tuple(range(2, a.ndim))
    return Tensor._result(a.data + b.data.reshape(view), (a, b),
                          lambda g: (g, g.sum(axis=axes)), "add_bias")


# reductions & reshaping ----------------------------------------------------

def sum(a, axis=None):
    out = a.data.sum(axis=axis)

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return Tensor._result(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None):
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis), 1.0 / n)


def reshape(a, shape):
    src = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose_last(a):
    """Swap the last two axes."""
    return Tensor._result(np.swapaxes(a.data, -1, -2), (a,),
                          lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat_channels(tensors):
    """Concatenate along axis 1."""
    sizes = [t.shape[1] for t in tensors]
    for t in tensors[1:]:
        if t.shape[:1] + t.shape[2:] != tensors[0].shape[:1] + tensors[0].shape[2:]:
            raise ValueError("concat_channels: non-channel extents differ")
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=1)
    return Tensor._result(out, tuple(tensors),
                          lambda g: tuple(np.split(g, splits, axis=1)), "concat")


def gather(a, idx):
    """``a[i, idx[i]]`` for a 2-D tensor; returns shape ``(N,)``."""
    idx = np.asarray(idx, dtype=np.int64)
    rows = np.arange(a.shape[0])

    def bw(g):
        d = np.zeros_like(a.data)
        d[rows, idx] = g
        return (d,)

    return Tensor._result(a.data[rows, idx], (a,), bw, "gather")


def take_rows(a, idx):
    """Rows of ``a`` along axis 0 (embedding lookup / batch subset)."""
    idx = np.asarray(idx, dtype=np.int64)

    def bw(g):
        d = np.zeros_like(a.data)
        np.add.at(d, idx, g)
        return (d,)

    return Tensor._result(a.data[idx], (a,), bw, "take_rows")


def scatter_rows(a, idx, n):
    """Place the rows of ``a`` at positions ``idx`` of a zero tensor with ``n`` rows."""
    idx = np.asarray(idx, dtype=np.int64)
    out = np.zeros((n,) + a.shape[1:], dtype=a.data.dtype)
    out[idx] = a.data
    return Tensor._result(out, (a,), lambda g: (g[idx],), "scatter_rows")


# linear algebra ------------------------------------------------------------

def matmul(a, b):
    """2-D product, or batched product when both operands are 3-D with equal batch."""
    if a.ndim != b.ndim or a.ndim not in (2, 3) or a.shape[-1] != b.shape[-2] \
            or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def bw(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return Tensor._result(a.data @ b.data, (a, b), bw, "matmul")


def conv2d(x, w, stride=1, padding=0):
    """Cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,k,k)."""
    if x.ndim != 4 or w.ndim != 4 or w.shape[1] != x.shape[1]:
        raise ValueError(f"conv2d: channel mismatch input {x.shape} kernel {w.shape}")
    n, c, h, wd = x.shape
    o, _, k, k2 = w.shape
    if k != k2 or k not in (1, 3):
        raise ValueError(f"conv2d: unsupported kernel {w.shape[2:]}")
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    wmat = w.data.reshape(o, c * k * k)
    if k == 1 and stride == 1 and padding == 0:
        cols = x.data.transpose(1, 0, 2, 3).reshape(c, n * h * wd)
    else:
        cols = kernels.im2col(x.data, k, stride, padding)
    out = (wmat @ cols).reshape(o, n, ho, wo).transpose(1, 0, 2, 3)

    def bw(g):
        gm = g.transpose(1, 0, 2, 3).reshape(o, n * ho * wo)
        dw = (gm @ cols.T).reshape(w.shape)
        dcols = wmat.T @ gm
        if k == 1 and stride == 1 and padding == 0:
            dx = dcols.reshape(c, n, h, wd).transpose(1, 0, 2, 3)
        else:
            dx = kernels.col2im(dcols, x.shape, k, stride, padding)
        return (np.ascontiguousarray(dx), dw)

    return Tensor._result(np.ascontiguousarray(out), (x, w), bw, "conv2d")


def batchnorm2d(x, gamma, beta, running_mean, running_var, train, eps=BN_EPS,
                momentum=BN_MOMENTUM):
    """Per-channel batch normalization over (N, H, W).

    ``running_mean``/``running_var`` are plain numpy buffers, updated in place
    in train mode (unbiased variance, as is conventional).
    """
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or running_mean.shape != (c,) \
            or running_var.shape != (c,):
        raise ValueError(f"batchnorm2d: parameters do not match {c} channels")
    view = (1, c, 1, 1)
    dt = x.data.dtype.type
    if train:
        m = x.shape[0] * x.shape[2] * x.shape[3]
        if x.shape[0] == 0:
            raise ValueError("batchnorm2d: empty batch in train mode")
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        inv = dt(1.0) / np.sqrt(var + dt(eps))
        xhat = (x.data - mu.reshape(view)) * inv.reshape(view)
        unbiased = var * (m / max(m - 1, 1))
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * unbiased

        def bw(g):
            dg = (g * xhat).sum(axis=(0, 2, 3))
            db = g.sum(axis=(0, 2, 3))
            gx = g * gamma.data.reshape(view)
            dx = (gx - gx.mean(axis=(0, 2, 3)).reshape(view)
                  - xhat * (gx * xhat).mean(axis=(0, 2, 3)).reshape(view)) * inv.reshape(view)
            return (dx, dg, db)
    else:
        inv = dt(1.0) / np.sqrt(running_var.astype(x.data.dtype) + dt(eps))
        xhat = (x.data - running_mean.astype(x.data.dtype).reshape(view)) * inv.reshape(view)

        def bw(g):
            dg = (g * xhat).sum(axis=(0, 2, 3))
            db = g.sum(axis=(0, 2, 3))
            return (g * (gamma.data * inv).reshape(view), dg, db)

    out = xhat * gamma.data.reshape(view) + beta.data.reshape(view)
    return Tensor._result(out, (x, gamma, beta), bw, "batchnorm2d")


def global_avg_pool(x):
    """(N, C, H, W) -> (N, C)."""
    n, c, h, w = x.shape
    area = h * w
    return Tensor._result(x.data.mean(axis=(2, 3)), (x,),
                          lambda g: (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),),
                          "gap")


# probabilities -------------------------------------------------------------

def softmax(a):
    """Softmax over the last axis."""
    if a.shape[-1] < 2:
        raise ValueError("softmax needs at least two classes")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return Tensor._result(s, (a,), bw, "softmax")


def log_softmax(a):
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def bw(g):
        return (g - s * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (a,), bw, "log_softmax")


def cross_entropy(logits, labels, reduction="mean"):
    """Categorical cross-entropy of (N, C) logits against integer labels."""
    nll = scale(gather(log_softmax(logits), labels), -1.0)
    if reduction == "none":
        return nll
    if reduction == "sum":
        return sum(nll)
    return mean(nll)


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop ``params`` from requiring gradients."""
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s
