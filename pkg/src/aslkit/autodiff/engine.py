"""Dense float64 arrays with reverse-mode differentiation.

Every operation on an :class:`Array` that involves a ``requires_grad`` input is
recorded with a monotonically increasing sequence number.  ``backward`` replays
the recorded operations in exact reverse execution order and accumulates
adjoints additively.  A graph can be differentiated once; a second call raises
:class:`TapeError`.
"""
from __future__ import annotations

import itertools
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

_SEQ = itertools.count()
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, *shapes: tuple[int, ...], detail: str = ""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(tuple(s)) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class TapeError(RuntimeError):
    pass


class Array:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq", "_op", "_done")
    __array_priority__ = 1000.0

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise ValueError("Array data must be finite")
        self._init(arr, requires_grad, (), None, "leaf")

    def _init(self, data, requires_grad, parents, backward, op):
        self.data = data
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self._op = op
        self._seq = next(_SEQ)
        self._done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Array":
        return constant(self.data)

    def __repr__(self) -> str:
        return f"Array(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    @property
    def T(self) -> "Array":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def constant(data) -> Array:
    """Wrap ``data`` without finiteness checks and without gradient tracking."""
    out = Array.__new__(Array)
    out._init(np.asarray(data, dtype=np.float64), False, (), None, "const")
    return out


def as_array(x) -> Array:
    return x if isinstance(x, Array) else constant(x)


def _record(data: np.ndarray, parents: Sequence[Array], backward: Callable, op: str) -> Array:
    out = Array.__new__(Array)
    if any(p.requires_grad for p in parents):
        out._init(data, True, tuple(parents), backward, op)
    else:
        out._init(data, False, (), None, op)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_check(op: str, a: Array, b: Array) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


def backward(loss: Array) -> None:
    """Populate ``grad`` on every ``requires_grad`` leaf reachable from ``loss``."""
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._done:
        raise TapeError("tape already consumed; rebuild the graph with a fresh forward pass")
    if not loss.requires_grad:
        raise TapeError("loss does not depend on any requires_grad array")

    nodes: list[Array] = []
    seen: set[int] = set()
    stack = [loss]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        nodes.append(node)
        stack.extend(node._parents)
    nodes.sort(key=lambda n: n._seq, reverse=True)

    adj: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in nodes:
        g = adj.pop(id(node), None)
        if node._backward is None:
            if node.requires_grad and g is not None:
                node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if node._done:
            raise TapeError(f"stale tape at op {node._op}")
        if g is not None:
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adj[key] = adj[key] + pg if key in adj else pg
        node._done = True
        node._parents = ()
        node._backward = _consumed


def _consumed(g):
    raise TapeError("stale tape")


# elementwise arithmetic

def add(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("add", a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("sub", a, b)

    def bw(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(-g, b.shape) if b.requires_grad else None,
        )

    return _record(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("mul", a, b)

    def bw(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _record(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def bw(g):
        return (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        )

    return _record(out, (a, b), bw, "div")


def neg(a) -> Array:
    a = as_array(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, p: float) -> Array:
    a = as_array(a)
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _record(a.data**p, (a,), bw, "pow")


def maximum(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("maximum", a, b)
    pick_a = a.data >= b.data

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _record(np.where(pick_a, a.data, b.data), (a, b), bw, "maximum")


def minimum(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    _broadcast_check("minimum", a, b)
    pick_a = a.data <= b.data

    def bw(g):
        return _unbroadcast(np.where(pick_a, g, 0.0), a.shape), _unbroadcast(np.where(pick_a, 0.0, g), b.shape)

    return _record(np.where(pick_a, a.data, b.data), (a, b), bw, "minimum")


# unary nonlinearities

def exp(a) -> Array:
    a = as_array(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Array:
    a = as_array(a)
    return _record(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Array:
    a = as_array(a)
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs_(a) -> Array:
    a = as_array(a)
    return _record(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a) -> Array:
    a = as_array(a)
    pos = a.data > 0
    return _record(np.where(pos, a.data, 0.0), (a,), lambda g: (np.where(pos, g, 0.0),), "relu")


def gelu(a) -> Array:
    """Exact (erf-based) GELU."""
    a = as_array(a)
    cdf = 0.5 * (1.0 + erf(a.data / _SQRT2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data**2)
        return (g * (cdf + a.data * pdf),)

    return _record(a.data * cdf, (a,), bw, "gelu")


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def sigmoid(a) -> Array:
    a = as_array(a)
    out = _stable_sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def softplus(a) -> Array:
    """log(1 + exp(x)) without overflow."""
    a = as_array(a)
    out = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))
    return _record(out, (a,), lambda g: (g * _stable_sigmoid(a.data),), "softplus")


def tanh(a) -> Array:
    a = as_array(a)
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1.0 - out**2),), "tanh")


# reductions and normalizers

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Array:
    a = as_array(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw, "mean")


def softmax(a, axis: int = -1) -> Array:
    a = as_array(a)
    out = a.data - a.data.max(axis=axis, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=axis, keepdims=True)

    def bw(g):
        gx = g * out
        gx -= out * gx.sum(axis=axis, keepdims=True)
        return (gx,)

    return _record(out, (a,), bw, "softmax")


def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Array:
    a = as_array(a)
    m = a.data.max(axis=axis, keepdims=True)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_k = m + np.log(s)
    weights = np.exp(a.data - out_k)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return _record(out, (a,), bw, "logsumexp")


def layer_norm(a, axis: int = -1, eps: float = 1e-5) -> Array:
    """Normalize to zero mean and unit variance along ``axis`` (no affine)."""
    a = as_array(a)
    mu = a.data.mean(axis=axis, keepdims=True)
    xc = a.data - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=axis, keepdims=True) + eps)
    y = xc * inv

    def bw(g):
        gm = g.mean(axis=axis, keepdims=True)
        gy = (g * y).mean(axis=axis, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return _record(y, (a,), bw, "layer_norm")


# linear algebra and shape manipulation

def matmul(a, b) -> Array:
    a, b = as_array(a), as_array(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape, detail="batch dims") from None

    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight matrix: one GEMM over the flattened rows
        a2 = a.data.reshape(-1, a.shape[-1])

        def bw2(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            return ga, (a2.T @ g2 if b.requires_grad else None)

        return _record((a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],)), (a, b), bw2, "matmul")

    def bw(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return _record(a.data @ b.data, (a, b), bw, "matmul")


def reshape(a, shape) -> Array:
    a = as_array(a)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _record(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes: Sequence[int] | None = None) -> Array:
    """Permute axes; the default swaps the last two."""
    a = as_array(a)
    if axes is None:
        axes = list(range(a.ndim))
        axes[-2], axes[-1] = axes[-1], axes[-2]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def getitem(a, idx) -> Array:
    a = as_array(a)
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return _record(np.array(out), (a,), bw, "slice")


slice_ = getitem


def take(a, indices, axis: int = 0) -> Array:
    """Gather along ``axis`` with an integer index array (repeats allowed)."""
    a = as_array(a)
    indices = np.asarray(indices, dtype=np.intp)
    ax = axis % a.ndim

    def bw(g):
        full = np.zeros_like(a.data)
        moved_full = np.moveaxis(full, ax, 0)
        np.add.at(moved_full, indices.ravel(), np.moveaxis(g, ax, 0).reshape((-1,) + moved_full.shape[1:]))
        return (full,)

    return _record(np.take(a.data, indices, axis=ax), (a,), bw, "take")


def concat(arrays: Iterable, axis: int = 0) -> Array:
    arrays = [as_array(x) for x in arrays]
    if not arrays:
        raise ValueError("concat of empty list")
    ax = axis % arrays[0].ndim
    ref = arrays[0].shape
    for x in arrays[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, x.shape, detail=f"axis={axis}")
    splits = np.cumsum([x.shape[ax] for x in arrays])[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return _record(np.concatenate([x.data for x in arrays], axis=ax), tuple(arrays), bw, "concat")


def stack(arrays: Iterable, axis: int = 0) -> Array:
    arrays = [as_array(x) for x in arrays]
    for x in arrays[1:]:
        if x.shape != arrays[0].shape:
            raise ShapeError("stack", arrays[0].shape, x.shape)

    def bw(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _record(np.stack([x.data for x in arrays], axis=axis), tuple(arrays), bw, "stack")


def masked_fill(a, mask: np.ndarray, value: float) -> Array:
    """Replace entries where ``mask`` is true by a constant; gradients there are zero."""
    a = as_array(a)
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return _record(np.where(mask, value, a.data), (a,), lambda g: (np.where(mask, 0.0, g),), "masked_fill")


# convolutions (channels-last: x is (..., T, C))

def _pad_time(x: np.ndarray, left: int, right: int) -> np.ndarray:
    pad = [(0, 0)] * x.ndim
    pad[-2] = (left, right)
    return np.pad(x, pad)


def conv1d(x, w, b=None, stride: int = 1) -> Array:
    """Same-padded 1D convolution over the time axis.

    ``x`` is (..., T, C_in), ``w`` is (k, C_in, C_out) with odd ``k``.  Output
    position ``j`` is centred on input position ``j * stride``.
    """
    x, w = as_array(x), as_array(w)
    if w.ndim != 3 or x.shape[-1] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError("conv1d", x.shape, w.shape)
    k, cin, cout = w.shape
    T = x.shape[-2]
    p = k // 2
    t_out = (T - 1) // stride + 1
    xp = _pad_time(x.data, p, p)
    cols = np.stack([xp[..., i : i + stride * (t_out - 1) + 1 : stride, :] for i in range(k)], axis=-2)
    cols = cols.reshape(cols.shape[:-2] + (k * cin,))
    wm = w.data.reshape(k * cin, cout)
    out = cols @ wm
    parents = [x, w]
    if b is not None:
        b = as_array(b)
        if b.shape != (cout,):
            raise ShapeError("conv1d", w.shape, b.shape, detail="bias")
        out = out + b.data
        parents.append(b)

    def bw(g):
        gw = (cols.reshape(-1, k * cin).T @ g.reshape(-1, cout)).reshape(k, cin, cout)
        gcols = (g @ wm.T).reshape(g.shape[:-1] + (k, cin))
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[..., i : i + stride * (t_out - 1) + 1 : stride, :] += gcols[..., i, :]
        gx = gxp[..., p : p + T, :]
        grads = [gx, gw]
        if b is not None:
            grads.append(g.reshape(-1, cout).sum(axis=0))
        return tuple(grads)

    return _record(out, tuple(parents), bw, "conv1d")


def depthwise_conv1d(x, w, b=None, stride: int = 1) -> Array:
    """Per-channel same-padded convolution; ``w`` is (k, C)."""
    x, w = as_array(x), as_array(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or w.shape[0] % 2 == 0:
        raise ShapeError("depthwise_conv1d", x.shape, w.shape)
    k, c = w.shape
    T = x.shape[-2]
    p = k // 2
    t_out = (T - 1) // stride + 1
    xp = _pad_time(x.data, p, p)
    taps = [xp[..., i : i + stride * (t_out - 1) + 1 : stride, :] for i in range(k)]
    out = sum(taps[i] * w.data[i] for i in range(k))
    parents = [x, w]
    if b is not None:
        b = as_array(b)
        out = out + b.data
        parents.append(b)

    def bw(g):
        gw = np.stack([(g * taps[i]).reshape(-1, c).sum(axis=0) for i in range(k)])
        gxp = np.zeros_like(xp)
        for i in range(k):
            gxp[..., i : i + stride * (t_out - 1) + 1 : stride, :] += g * w.data[i]
        grads = [gxp[..., p : p + T, :], gw]
        if b is not None:
            grads.append(g.reshape(-1, c).sum(axis=0))
        return tuple(grads)

    return _record(out, tuple(parents), bw, "depthwise_conv1d")


def scaled_dot_attention(q, k, v, key_mask: np.ndarray | None = None, scale: float | np.ndarray | None = None):
    """Softmax attention over the second-to-last axis of ``k``/``v``.

    ``key_mask`` is a boolean array broadcastable to the score shape
    (..., Tq, Tk) where True marks keys that may be attended to.  Returns the
    attended values and the attention weights.
    """
    q, k, v = as_array(q), as_array(k), as_array(v)
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise ShapeError("scaled_dot_attention", q.shape, k.shape, v.shape)
    if scale is None:
        scale = 1.0 / np.sqrt(q.shape[-1])
    scores = matmul(q, transpose(k)) * scale
    if key_mask is not None:
        scores = masked_fill(scores, ~np.asarray(key_mask, dtype=bool), -np.inf)
    attn = softmax(scores, axis=-1)
    return matmul(attn, v), attn
