"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Graph`::

    g = Graph()
    with g:
        loss = (w * w).sum() * 0.5
    grads = gradients(loss, g)      # grads[w] == w.data

Outside a graph context the same functions run as plain numpy arithmetic.
"""
import contextlib
import threading

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError

_local = threading.local()


def _graph_stack():
    if not hasattr(_local, "graphs"):
        _local.graphs = []
    return _local.graphs


def _active_graph():
    stack = _graph_stack()
    return stack[-1] if stack else None


@contextlib.contextmanager
def exact_accumulation():
    """Accumulate matmul/conv inner products sequentially in row-major order.

    Within this context results are bit-identical to a naive nested-loop
    implementation. Outside it, BLAS is used (deterministic, but the summation
    order is the library's).
    """
    prev = getattr(_local, "exact", False)
    _local.exact = True
    try:
        yield
    finally:
        _local.exact = prev


def _matmul_data(a, b):
    if not getattr(_local, "exact", False):
        return a @ b
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k:k + 1] * b[k:k + 1, :]
    return out


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._leaf = True

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

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic
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
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "parents", "backward", "forward")

    def __init__(self, out, parents, backward, forward):
        self.out = out
        self.parents = parents
        self.backward = backward
        self.forward = forward


class Graph:
    """Ordered record of primitive operations and the leaf parameters they touch."""

    def __init__(self):
        self.nodes = []
        self.parameters = []
        self._seen = set()

    def __enter__(self):
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc):
        _graph_stack().pop()
        return False

    def _record(self, out, parents, backward, forward):
        for p in parents:
            if p.requires_grad and p._leaf and id(p) not in self._seen:
                self._seen.add(id(p))
                self.parameters.append(p)
        self.nodes.append(_Node(out, parents, backward, forward))

    def replay(self):
        """Recompute every recorded node in order from its parents' values.

        Returns the list of recomputed arrays, aligned with ``self.nodes``.
        """
        values = {}
        out = []
        for node in self.nodes:
            args = [values.get(id(p), p.data) for p in node.parents]
            v = node.forward(*args)
            values[id(node.out)] = v
            out.append(v)
        return out


def _make(data, parents, backward, forward):
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._leaf = False
    out.requires_grad = any(p.requires_grad for p in parents)
    graph = _active_graph()
    if graph is not None and out.requires_grad:
        graph._record(out, parents, backward, forward)
    return out


def _unbroadcast(grad, shape):
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def gradients(loss, graph):
    """Reverse sweep over ``graph``; fills ``.grad`` on its parameters.

    Returns a dict mapping each parameter tensor to its gradient array.
    Parameters unreachable from ``loss`` receive zeros.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        parent_grads = node.backward(g)
        for parent, pg in zip(node.parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            pg = _unbroadcast(pg, parent.data.shape)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    result = {}
    for p in graph.parameters:
        g = grads.get(id(p))
        p.grad = np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64)
        result[p] = p.grad
    return result


# ---------------------------------------------------------------- elementwise


def _unary(fn, a, dfn):
    """Elementwise op whose derivative ``dfn(x, out)`` is multiplied into g."""
    a = as_tensor(a)
    out = fn(a.data)
    return _make(out, (a,), lambda g: (g * dfn(a.data, out),), fn)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data + b.data, (a, b), lambda g: (g, g), np.add)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), np.subtract)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), np.multiply)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _make(out, (a, b), lambda g: (g / b.data, -g * out / b.data), np.divide)


def power(a, p):
    return _unary(lambda x: x ** p, a, lambda x, out: p * x ** (p - 1))


def square(a):
    return _unary(np.square, a, lambda x, out: 2.0 * x)


def exp(a):
    return _unary(np.exp, a, lambda x, out: out)


def log(a):
    return _unary(np.log, a, lambda x, out: 1.0 / x)


def _dsqrt(x, out):
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(out > 0, 0.5 / out, 0.0)


def sqrt(a):
    """Square root whose gradient is defined as 0 at 0."""
    return _unary(np.sqrt, a, _dsqrt)


def sigmoid(a):
    return _unary(special.expit, a, lambda x, out: out * (1.0 - out))


def softplus(a):
    return _unary(lambda x: np.logaddexp(0.0, x), a, lambda x, out: special.expit(x))


def erf(a):
    return _unary(special.erf, a, lambda x, out: (2.0 / np.sqrt(np.pi)) * np.exp(-x * x))


def digamma(a):
    return _unary(special.digamma, a, lambda x, out: special.polygamma(1, x))


def relu(x):
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    return _unary(lambda v: np.where(v > 0, v, 0.0), x, lambda v, out: v > 0)


def fused(forward, backward, *inputs):
    """Lift a numpy kernel with a hand-written derivative.

    ``forward(*arrays) -> out``; ``backward(g, out, *arrays) -> tuple`` with
    one gradient (or None) per input.
    """
    inputs = tuple(as_tensor(x) for x in inputs)
    arrays = tuple(x.data for x in inputs)
    out = forward(*arrays)
    return _make(out, inputs, lambda g: backward(g, out, *arrays), forward)


# ---------------------------------------------------------------- reductions / shape


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def fn(x):
        return np.asarray(x.sum(axis=axis, keepdims=keepdims), dtype=np.float64)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.data.shape),)

    return _make(fn(a.data), (a,), backward, fn)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    axes = range(a.ndim) if axis is None else np.atleast_1d(axis)
    n = int(np.prod([a.data.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1):
    a = as_tensor(a)

    def fn(x):
        m = x.max(axis=axis, keepdims=True)
        return (np.log(np.exp(x - m).sum(axis=axis, keepdims=True)) + m).squeeze(axis)

    out = fn(a.data)

    def backward(g):
        soft = np.exp(a.data - np.expand_dims(out, axis))
        return (np.expand_dims(g, axis) * soft,)

    return _make(out, (a,), backward, fn)


def reshape(a, shape):
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.data.shape),),
                 lambda x: x.reshape(shape))


def transpose(a):
    a = as_tensor(a)
    return _make(a.data.T, (a,), lambda g: (g.T,), np.transpose)


def getitem(a, idx):
    a = as_tensor(a)

    def fn(x):
        return np.array(x[idx], dtype=np.float64)

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(fn(a.data), (a,), backward, fn)


def stack(tensors, axis=-1):
    tensors = tuple(as_tensor(t) for t in tensors)

    def fn(*xs):
        return np.stack(xs, axis=axis)

    return _make(fn(*(t.data for t in tensors)), tensors,
                 lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors))), fn)


def concat(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    splits = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]

    def fn(*xs):
        return np.concatenate(xs, axis=axis)

    return _make(fn(*(t.data for t in tensors)), tensors,
                 lambda g: tuple(np.split(g, splits, axis=axis)), fn)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shapes {a.shape} and {b.shape} do not align")
    out = _matmul_data(a.data, b.data)
    return _make(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g), _matmul_data)


def _im2col(x, kh, kw, stride):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _conv_data(xd, kd, stride):
    n = xd.shape[0]
    co = kd.shape[0]
    cols, ho, wo = _im2col(xd, kd.shape[2], kd.shape[3], stride)
    out = _matmul_data(cols, kd.reshape(co, -1).T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d(x, k, stride=1):
    """Valid cross-correlation. ``x`` is [c,h,w] or [n,c,h,w]; ``k`` is [co,ci,kh,kw]."""
    x, k = as_tensor(x), as_tensor(k)
    single = x.ndim == 3
    if x.ndim not in (3, 4) or k.ndim != 4:
        raise DimensionError(f"conv2d expects 3/4-d input and 4-d kernel, got {x.shape}, {k.shape}")
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    co, ci, kh, kw = k.shape
    if ci != c:
        raise DimensionError(f"input has {c} channels, kernel expects {ci}")
    if kh > h or kw > w:
        raise DimensionError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    out, cols = _conv_data(xd, k.data, stride)
    ho, wo = out.shape[2], out.shape[3]

    def fn(xv, kv):
        o = _conv_data(xv[None] if single else xv, kv, stride)[0]
        return o[0] if single else o

    def backward(g):
        g4 = g[None] if single else g
        gm = g4.transpose(0, 2, 3, 1).reshape(-1, co)
        dk = (gm.T @ cols).reshape(k.data.shape)
        if not x.requires_grad:
            return None, dk
        dcols = (gm @ k.data.reshape(co, -1)).reshape(n, ho, wo, c, kh, kw)
        # accumulate channels-last, where each tap's slice is a plain strided add
        dxl = np.zeros((n, h, w, c))
        for i in range(kh):
            for j in range(kw):
                dxl[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[..., i, j]
        dx = dxl.transpose(0, 3, 1, 2)
        return (dx[0] if single else dx, dk)

    return _make(out[0] if single else out, (x, k), backward, fn)


def _pool_windows(xd):
    n, c, h, w = xd.shape
    return xd.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)


def max_pool2(x):
    """2x2 non-overlapping max pool over the last two axes ([c,h,w] or [n,c,h,w])."""
    x = as_tensor(x)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    n, c, h, w = xd.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max_pool2 needs even spatial dims, got {h}x{w}")
    win = _pool_windows(xd)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def fn(xv):
        o = _pool_windows(xv[None] if single else xv).max(axis=-1)
        return o[0] if single else o

    def backward(g):
        g4 = g[None] if single else g
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g4[..., None], axis=-1)
        dx = gw.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (dx[0] if single else dx,)

    return _make(out[0] if single else out, (x,), backward, fn)


def softmax_xent(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under softmax(logits)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"logits {logits.shape} vs labels {labels.shape}")
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise IndexError(f"labels must lie in [0, {k})")
    b = logits.shape[0]
    rows = np.arange(b)

    def fn(x):
        z = x - x.max(axis=1, keepdims=True)
        lse = np.log(np.exp(z).sum(axis=1))
        return np.asarray(np.mean(lse - z[rows, labels]))

    def backward(g):
        z = logits.data - logits.data.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        p[rows, labels] -= 1.0
        return (g * p / b,)

    return _make(fn(logits.data), (logits,), backward, fn)
