"""Dense tensors with reverse-mode automatic differentiation.

A :class:`Tensor` wraps a numpy array plus an optional gradient.  Every
differentiable kernel records a backward closure on its output; calling
:func:`backward` on a scalar replays the recorded graph in reverse
topological order and accumulates gradients on the leaves that asked for
them.  A graph supports exactly one backward pass, after which it is
consumed.

Precision policy: creation helpers honour a global default dtype, float32
for training and inference.  Gradient checking runs under
``precision("float64")`` so central differences are trustworthy.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dtype.type


def default_dtype():
    return _DEFAULT_DTYPE


class precision:
    """Context manager switching the default dtype, e.g. ``precision("float64")``."""

    def __init__(self, dtype):
        self.dtype = np.dtype(dtype).type
        self._saved = None

    def __enter__(self):
        global _DEFAULT_DTYPE
        self._saved = _DEFAULT_DTYPE
        set_default_dtype(self.dtype)
        return self

    def __exit__(self, *exc):
        global _DEFAULT_DTYPE
        _DEFAULT_DTYPE = self._saved
        return False


class no_grad:
    """Context manager that disables graph recording (pure forward)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._saved = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._saved
        return False


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    """N-dimensional array with optional gradient tracking.

    ``data`` is always a numpy float array.  ``grad`` is populated by
    :func:`backward` on leaves with ``requires_grad`` (and on any node that
    called :meth:`retain_grad`).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward",
                 "_retain_grad", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is not None:
            arr = np.asarray(data, dtype=dtype)
        elif isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64):
            arr = data
        else:
            arr = np.asarray(data, dtype=_DEFAULT_DTYPE)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._retain_grad = False
        self._consumed = False

    # ---- inspection ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def retain_grad(self) -> "Tensor":
        self._retain_grad = True
        return self

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # ---- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_coerce(other)))

    def __rsub__(self, other):
        return add(_coerce(other), neg(self))

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_coerce(other), self)

    def __pow__(self, c):
        return power(self, c)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)


class Graph:
    """Topologically ordered record of one traced forward computation.

    ``nodes`` lists every tensor reachable from the root, producers before
    consumers.  A graph is consumed by a single backward pass.
    """

    __slots__ = ("nodes",)

    def __init__(self, nodes):
        self.nodes = nodes

    @classmethod
    def trace(cls, root: Tensor) -> "Graph":
        nodes: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in visited:
                    stack.append((p, False))
        return cls(nodes)


def backward(loss: Tensor) -> None:
    """Reverse-mode pass from a scalar loss.

    Populates ``grad`` on every ``requires_grad`` leaf reachable from
    ``loss`` (accumulating if already set) and consumes the graph: a second
    backward on the same forward raises.
    """
    if loss._consumed:
        raise RuntimeError("backward already ran on this graph; run a new forward first")
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    if loss._backward is None and not loss.requires_grad:
        raise RuntimeError("loss was not produced by a recorded graph")

    graph = Graph.trace(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._retain_grad or (node._backward is None and node.requires_grad):
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is not None:
            node._backward(g, grads)
    # consume: drop closures so the graph cannot be replayed
    for node in graph.nodes:
        node._backward = None
        node._parents = ()
    loss._consumed = True


# ---- op plumbing ---------------------------------------------------------


def _coerce(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(grads: dict, t: Tensor, g: np.ndarray) -> None:
    if not (t.requires_grad or t._backward is not None or t._retain_grad):
        return
    key = id(t)
    if key in grads:
        grads[key] = grads[key] + g
    else:
        grads[key] = g


def _make(out_data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Optional[Callable]) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._retain_grad = False
    out._consumed = False
    track = _GRAD_ENABLED and any(
        p.requires_grad or p._backward is not None for p in parents)
    if track:
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---- elementwise kernels -------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data + b.data

    def back(g, grads):
        _accum(grads, a, _unbroadcast(g, a.data.shape))
        _accum(grads, b, _unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data * b.data

    def back(g, grads):
        _accum(grads, a, _unbroadcast(g * b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    out_data = a.data / b.data

    def back(g, grads):
        _accum(grads, a, _unbroadcast(g / b.data, a.data.shape))
        _accum(grads, b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), back)


def neg(a) -> Tensor:
    a = _coerce(a)

    def back(g, grads):
        _accum(grads, a, -g)

    return _make(-a.data, (a,), back)


def power(a, c: float) -> Tensor:
    a = _coerce(a)
    c = float(c)
    out_data = a.data ** c

    def back(g, grads):
        _accum(grads, a, g * c * a.data ** (c - 1.0))

    return _make(out_data, (a,), back)


def exp(a) -> Tensor:
    a = _coerce(a)
    out_data = np.exp(a.data)

    def back(g, grads):
        _accum(grads, a, g * out_data)

    return _make(out_data, (a,), back)


def log(a) -> Tensor:
    a = _coerce(a)

    def back(g, grads):
        _accum(grads, a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient passes through the interior, zero where clamped."""
    a = _coerce(a)
    out_data = np.clip(a.data, lo, hi)
    inside = (a.data > lo) & (a.data < hi)

    def back(g, grads):
        _accum(grads, a, g * inside)

    return _make(out_data, (a,), back)


def relu(a) -> Tensor:
    a = _coerce(a)
    mask = a.data > 0

    def back(g, grads):
        _accum(grads, a, g * mask)

    return _make(a.data * mask, (a,), back)


def sigmoid(a) -> Tensor:
    a = _coerce(a)
    # split by sign to avoid exp overflow on large magnitudes
    pos = a.data >= 0
    e = np.exp(np.where(pos, -a.data, a.data))
    out_data = np.where(pos, 1.0 / (1.0 + e), e / (1.0 + e))

    def back(g, grads):
        _accum(grads, a, g * out_data * (1.0 - out_data))

    return _make(out_data, (a,), back)


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF GELU: x * Phi(x)."""
    a = _coerce(a)
    phi = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out_data = a.data * phi

    def back(g, grads):
        dens = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        _accum(grads, a, g * (phi + a.data * dens))

    return _make(out_data, (a,), back)


# ---- reductions and shape ops --------------------------------------------


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis % a.data.ndim,)
    else:
        axes = tuple(ax % a.data.ndim for ax in axis)

    def back(g, grads):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        _accum(grads, a, np.broadcast_to(gg, a.data.shape))

    return _make(np.asarray(out_data), (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _coerce(a)
    if axis is None:
        n = a.data.size
    elif isinstance(axis, int):
        n = a.data.shape[axis]
    else:
        n = 1
        for ax in axis:
            n *= a.data.shape[ax]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _coerce(a)
    old = a.data.shape

    def back(g, grads):
        _accum(grads, a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), back)


def transpose(a, axes) -> Tensor:
    a = _coerce(a)
    inv = np.argsort(axes)

    def back(g, grads):
        _accum(grads, a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), back)


def getitem(a, key) -> Tensor:
    a = _coerce(a)
    out_data = a.data[key]

    def back(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        _accum(grads, a, full)

    return _make(np.ascontiguousarray(out_data), (a,), back)


def concat(parts: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def back(g, grads):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            idx = [slice(None)] * g.ndim
            idx[axis] = slice(lo, hi)
            _accum(grads, p, g[tuple(idx)])

    return _make(out_data, tuple(parts), back)


def roll(a, shift, axes) -> Tensor:
    a = _coerce(a)
    shift = tuple(np.atleast_1d(shift))
    axes = tuple(np.atleast_1d(axes))

    def back(g, grads):
        _accum(grads, a, np.roll(g, tuple(-s for s in shift), axes))

    return _make(np.roll(a.data, shift, axes), (a,), back)


def take(a, index: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0 with an integer index array."""
    a = _coerce(a)
    index = np.asarray(index)

    def back(g, grads):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        _accum(grads, a, full)

    return _make(a.data[index], (a,), back)


# ---- dense linear algebra --------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs 2-d or batched operands, got {a.data.shape} x {b.data.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out_data = np.matmul(a.data, b.data)

    def back(g, grads):
        da = np.matmul(g, np.swapaxes(b.data, -1, -2))
        db = np.matmul(np.swapaxes(a.data, -1, -2), g)
        _accum(grads, a, _unbroadcast(da, a.data.shape))
        _accum(grads, b, _unbroadcast(db, b.data.shape))

    return _make(out_data, (a, b), back)


def softmax(a, axis: int = -1) -> Tensor:
    """Exp-normalize along ``axis`` with max-subtraction for stability."""
    a = _coerce(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def back(g, grads):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(grads, a, out_data * (g - dot))

    return _make(out_data, (a,), back)


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then affine."""
    a, gamma, beta = _coerce(a), _coerce(gamma), _coerce(beta)
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gamma.data + beta.data

    def back(g, grads):
        d = a.data.shape[-1]
        gy = g * gamma.data
        dx = inv * (gy - gy.mean(axis=-1, keepdims=True)
                    - xhat * (gy * xhat).mean(axis=-1, keepdims=True))
        _accum(grads, a, dx)
        red = tuple(range(g.ndim - 1))
        _accum(grads, gamma, (g * xhat).sum(axis=red))
        _accum(grads, beta, g.sum(axis=red))

    return _make(out_data, (a, gamma, beta), back)


# ---- convolution kernels ---------------------------------------------------


def conv2d(x, k, stride: int = 1, pad: int = 0, bias=None) -> Tensor:
    """Cross-correlation of ``x[C,H,W]`` with ``k[Cout,Cin,kh,kw]``.

    Zero padding, no kernel flip.  Output is ``[Cout, H', W']`` with
    ``H' = (H + 2*pad - kh)//stride + 1``.
    """
    x, k = _coerce(x), _coerce(k)
    cin, h, w = x.data.shape
    cout, cin_k, kh, kw = k.data.shape
    if cin != cin_k:
        raise ValueError(f"conv2d channel mismatch: input {x.data.shape} vs kernel {k.data.shape}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d output would be empty: input {x.data.shape}, kernel {k.data.shape}, "
            f"stride={stride}, pad={pad}")

    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # [C, Ho, Wo, kh, kw] -> [Ho*Wo, C*kh*kw]
    cols = np.ascontiguousarray(win.transpose(1, 2, 0, 3, 4)).reshape(ho * wo, cin * kh * kw)
    w2 = k.data.reshape(cout, cin * kh * kw)
    out2 = cols @ w2.T
    out_data = np.ascontiguousarray(out2.T).reshape(cout, ho, wo)
    parents = [x, k]
    if bias is not None:
        bias = _coerce(bias)
        out_data = out_data + bias.data[:, None, None]
        parents.append(bias)

    def back(g, grads):
        g2 = g.reshape(cout, ho * wo)
        _accum(grads, k, (g2 @ cols).reshape(k.data.shape))
        dcols = g2.T @ w2                                  # [Ho*Wo, C*kh*kw]
        dwin = dcols.reshape(ho, wo, cin, kh, kw).transpose(2, 0, 1, 3, 4)
        dxp = np.zeros((cin, h + 2 * pad, w + 2 * pad), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += dwin[:, :, :, i, j]
        dx = dxp[:, pad:pad + h, pad:pad + w] if pad else dxp
        _accum(grads, x, dx)
        if bias is not None:
            _accum(grads, bias, g.sum(axis=(1, 2)))

    return _make(out_data, tuple(parents), back)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour x2 upsampling of ``[C,H,W]``."""
    x = _coerce(x)
    c, h, w = x.data.shape
    out_data = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def back(g, grads):
        _accum(grads, x, g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)))

    return _make(out_data, (x,), back)


# ---- creation helpers ------------------------------------------------------


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def full(shape, value: float, requires_grad: bool = False) -> Tensor:
    return Tensor(np.full(shape, value, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


# ---- gradient checking -----------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be scalar-valued.  ``x`` is promoted to float64; any
    parameters captured by ``f`` should already be float64 (build the model
    under ``precision("float64")``).  The error denominator is
    ``max(|analytic|, |numeric|, 1e-8)`` per coordinate.
    """
    base = np.asarray(x.data, dtype=np.float64).copy()
    with precision("float64"):
        probe = Tensor(base.copy(), requires_grad=True)
        out = f(probe)
        backward(out)
        analytic = probe.grad
        if analytic is None:
            analytic = np.zeros_like(base)

        numeric = np.zeros_like(base)
        flat = numeric.reshape(-1)
        with no_grad():
            for i in range(base.size):
                bump = base.copy().reshape(-1)
                bump[i] += h
                fp = float(f(Tensor(bump.reshape(base.shape))).data)
                bump[i] -= 2 * h
                fm = float(f(Tensor(bump.reshape(base.shape))).data)
                flat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
