"""Dense tensors with define-by-run reverse-mode differentiation.

Values are float32 unless a ``precision`` context asks otherwise (gradient
checks run in float64). Each op records its parents and a backward closure
that maps the output gradient to one gradient per parent.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

_state = threading.local()


def _dtype():
    return getattr(_state, "dtype", np.float32)


def _grad_enabled():
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def precision(dtype):
    old = _dtype()
    _state.dtype = dtype
    try:
        yield
    finally:
        _state.dtype = old


@contextlib.contextmanager
def no_grad():
    old = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = old


class ShapeError(ValueError):
    pass


class RankError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        arr = np.asarray(data)
        if arr.dtype != _dtype():
            arr = arr.astype(_dtype())
        self.data = arr
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

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.data.size != 1:
            raise RankError(f"backward needs a scalar loss, got shape {self.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    __radd__ = __add__

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    __rmul__ = __mul__

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward):
    req = _grad_enabled() and any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data)
    return Tensor(data, True, tuple(parents), backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _check_broadcast(a, b, op):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# --- elementwise ------------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data
    return _make(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)),
    )


def relu(x):
    x = as_tensor(x)
    return _make(np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def leaky_relu(x, slope=0.01):
    x = as_tensor(x)
    scale = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return _make(x.data * scale, (x,), lambda g: (g * scale,))


def sigmoid(x):
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),))


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_tensor(x)
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sqrt(x):
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (0.5 * g / out,))


def square(x):
    x = as_tensor(x)
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def clip(x, lo=None, hi=None):
    """Clamp values; the gradient is zero where clamping was active."""
    x = as_tensor(x)
    out = np.clip(x.data, lo, hi)
    passed = out == x.data
    return _make(out, (x,), lambda g: (g * passed,))


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "minimum")
    pick_a = a.data <= b.data
    return _make(
        np.minimum(a.data, b.data),
        (a, b),
        lambda g: (_unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)),
    )


# --- linear algebra -----------------------------------------------------------

def matmul(a, b):
    """``a @ b`` for a of shape (..., n, k) and b of shape (k, m)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = None
        if b.requires_grad:
            a2 = a.data.reshape(-1, a.shape[-1])
            gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), backward)


def sparse_matmul(M, x):
    """``M @ x`` for a constant scipy sparse matrix ``M`` and dense 2-D ``x``."""
    x = as_tensor(x)
    if M.shape[1] != x.shape[0]:
        raise ShapeError(f"sparse_matmul: incompatible shapes {M.shape} and {x.shape}")
    out = np.asarray(M @ x.data, dtype=x.data.dtype)
    return _make(out, (x,), lambda g: (np.asarray(M.T @ g, dtype=g.dtype),))


# --- reductions ---------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _make(out, (x,), backward)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axes, keepdims), 1.0 / count)


def max_(x, axis=-1):
    """Maximum over one axis; the gradient goes to the first maximiser."""
    x = as_tensor(x)
    axis = axis % x.ndim
    out = x.data.max(axis=axis)

    def backward(g):
        idx = np.argmax(x.data, axis=axis)
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return _make(out, (x,), backward)


def max_pool_over_points(x):
    """Max over the point axis of an (..., N, C) tensor."""
    return max_(x, axis=-2)


def logsumexp(x, axis=-1, mask=None):
    """Stable log-sum-exp; entries where ``mask`` is False are excluded.

    Rows with no included entry give ``-inf`` and a zero gradient.
    """
    x = as_tensor(x)
    axis = axis % x.ndim
    data = x.data if mask is None else np.where(mask, x.data, -np.inf)
    m = data.max(axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(data - m_safe)
    s = e.sum(axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = (np.log(s) + m_safe).squeeze(axis)
    soft = np.divide(e, s, out=np.zeros_like(e), where=s > 0)
    return _make(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def softplus(x):
    x = as_tensor(x)
    out = np.logaddexp(0.0, x.data).astype(x.data.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(out, (x,), lambda g: (g * sig,))


def log_softmax(x, axis=-1):
    x = as_tensor(x)
    m = x.data.max(axis=axis, keepdims=True)
    shifted = x.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _make(out, (x,), lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def softmax(x, axis=-1):
    x = as_tensor(x)
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)
    return _make(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


# --- shape ------------------------------------------------------------------

def reshape(x, shape):
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from None
    return _make(out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes=None):
    x = as_tensor(x)
    out = np.transpose(x.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return _make(out, (x,), lambda g: (np.transpose(g, inv),))


def getitem(x, idx):
    x = as_tensor(x)
    out = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _make(out, (x,), backward)


def take_rows(x, rows):
    """Gather rows of a 2-D tensor (repeats allowed)."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    out = x.data[rows]

    def backward(g):
        gx = np.zeros_like(x.data)
        if len(np.unique(rows)) == len(rows):
            gx[rows] = g
        else:
            np.add.at(gx, rows, g)
        return (gx,)

    return _make(out, (x,), backward)


def concat(tensors, axis=-1):
    ts = [as_tensor(t) for t in tensors]
    nd = ts[0].ndim
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}")
    out = np.concatenate([t.data for t in ts], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return _make(out, tuple(ts), backward)


def broadcast_to(x, shape):
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape)
    return _make(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),))


# --- convolution ------------------------------------------------------------

def pad2d(x, mode="zeros"):
    """Pad the two spatial axes of an (..., H, W, C) tensor by one pixel."""
    x = as_tensor(x)
    width = [(0, 0)] * (x.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    if mode == "zeros":
        out = np.pad(x.data, width)
    elif mode == "edge":
        out = np.pad(x.data, width, mode="edge")
    else:
        raise ValueError(f"unknown padding mode {mode!r}")

    def backward(g):
        if mode == "zeros":
            return (g[..., 1:-1, 1:-1, :],)
        g = g.copy()
        g[..., 1, :, :] += g[..., 0, :, :]
        g[..., -2, :, :] += g[..., -1, :, :]
        g[..., :, 1, :] += g[..., :, 0, :]
        g[..., :, -2, :] += g[..., :, -1, :]
        return (g[..., 1:-1, 1:-1, :],)

    return _make(out, (x,), backward)


def _im2col(xp, stride):
    # xp: (B, Hp, Wp, C) padded input -> (B, Ho, Wo, 3, 3, C) view
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]  # (B, Ho, Wo, C, 3, 3)
    return win


def conv2d_3x3(x, w, stride=1, padding="zeros"):
    """3x3 convolution over (H, W, C) or (B, H, W, C) input.

    ``w`` has shape (3, 3, C_in, C_out); the output has ``ceil(H / stride)``
    rows. Padding is one pixel of zeros or edge replication.
    """
    x, w = as_tensor(x), as_tensor(w)
    squeeze = x.ndim == 3
    if squeeze:
        x = reshape(x, (1,) + x.shape)
    if x.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[-1]:
        raise ShapeError(f"conv2d_3x3: incompatible shapes {x.shape} and {w.shape}")
    xp = pad2d(x, padding)
    out = _conv_valid(xp, w, stride)
    if squeeze:
        out = reshape(out, out.shape[1:])
    return out


def _conv_valid(xp, w, stride):
    B, Hp, Wp, C = xp.shape
    Co = w.shape[3]
    win = _im2col(xp.data, stride)
    Ho, Wo = win.shape[1], win.shape[2]
    # (B, Ho, Wo, 3, 3, C) ordering to match w
    cols = np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(B * Ho * Wo, 9 * C)
    w2 = w.data.reshape(9 * C, Co)
    out = (cols @ w2).reshape(B, Ho, Wo, Co)

    def backward(g):
        g2 = g.reshape(-1, Co)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gx = None
        if xp.requires_grad:
            gcols = (g2 @ w2.T).reshape(B, Ho, Wo, 3, 3, C)
            gx = np.zeros_like(xp.data)
            for ky in range(3):
                for kx in range(3):
                    gx[:, ky : ky + stride * Ho : stride, kx : kx + stride * Wo : stride, :] += gcols[:, :, :, ky, kx, :]
        return gx, gw

    return _make(out, (xp, w), backward)


def l2_normalize(x, axis=-1, eps=1e-12):
    x = as_tensor(x)
    norm = sqrt(add(sum_(square(x), axis, keepdims=True), eps))
    return div(x, norm)
