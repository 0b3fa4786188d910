"""Dense tensors with define-by-run reverse-mode differentiation.

Operations are recorded on the innermost active :class:`GradTape` whenever at
least one input requires a gradient. Outside a tape nothing is recorded, which
is the mode used for sampling and evaluation.

>>> with GradTape() as tape:
...     x = Tensor([1.0, 2.0], requires_grad=True)
...     loss = (x * x).sum()
>>> tape.backward(loss)
>>> x.grad
array([2., 4.], dtype=float32)
"""
from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError

DEFAULT_DTYPE = np.float32

_local = threading.local()


def _stack() -> list:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> GradTape | None:
    stack = _stack()
    return stack[-1] if stack else None


class _Node:
    __slots__ = ("out", "parents", "backward")

    def __init__(self, out, parents, backward):
        self.out = out
        self.parents = parents
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations.

    Nodes are appended at creation time, so the list is always in topological
    order. A tape is single-writer and is meant to be rebuilt per forward pass.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> GradTape:
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every leaf."""
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent._leaf:
                    pg = np.array(pg, dtype=parent.data.dtype)
                    parent.grad = pg if parent.grad is None else parent.grad + pg
                else:
                    key = id(parent)
                    prev = grads.get(key)
                    grads[key] = pg if prev is None else prev + pg
        if loss._leaf:
            loss.grad = np.ones_like(loss.data)


def backward(tape: GradTape, loss: Tensor) -> None:
    tape.backward(loss)


def _record(data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    out = Tensor._wrap(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._leaf = False
        tape.nodes.append(_Node(out, parents, backward))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float array plus an optional place on the gradient tape.

    Parameters
    ----------
    data : array_like
        Values. Non-float input is cast to float32.
    requires_grad : bool
        Whether ``backward`` should produce ``grad`` for this leaf.
    dtype : numpy dtype, optional
        Force a dtype (float32 for training, float64 for gradient checks).
    """

    __slots__ = ("data", "requires_grad", "grad", "_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        elif dtype is None and not isinstance(data, np.ndarray):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(s < 1 for s in arr.shape):
            raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._leaf = True

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> Tensor:
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t._leaf = True
        return t

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def tape_node(self) -> bool:
        return not self._leaf

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> Tensor:
        return Tensor._wrap(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    def _lift(self, other) -> Tensor:
        if isinstance(other, Tensor):
            return other
        return Tensor._wrap(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic ----------------------------------------------------
    def __add__(self, other):
        return add(self, self._lift(other))

    def __radd__(self, other):
        return add(self._lift(other), self)

    def __sub__(self, other):
        return sub(self, self._lift(other))

    def __rsub__(self, other):
        return sub(self._lift(other), self)

    def __mul__(self, other):
        return mul(self, self._lift(other))

    def __rmul__(self, other):
        return mul(self._lift(other), self)

    def __truediv__(self, other):
        return div(self, self._lift(other))

    def __rtruediv__(self, other):
        return div(self._lift(other), self)

    def __neg__(self):
        return _record(-self.data, (self,), lambda g: (-g,))

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, self._lift(other))

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms --------------------------------------------------
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

    def swap_last(self):
        axes = list(range(self.ndim))
        axes[-1], axes[-2] = axes[-2], axes[-1]
        return transpose(self, tuple(axes))

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _record(ad * bd, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _record(out, (a, b), bw)


def power(a: Tensor, p: float) -> Tensor:
    ad = a.data
    return _record(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _record(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _record(out, (a,), lambda g: (g * (1 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _record(out, (a,), lambda g: (g * out * (1 - out),))


def silu(a: Tensor) -> Tensor:
    ad = a.data
    s = _sigmoid(ad)
    return _record(ad * s, (a,), lambda g: (g * (s * (1 + ad * (1 - s))),))


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    out = np.logaddexp(0, ad)
    return _record(out, (a,), lambda g: (g * _sigmoid(ad),))


# ---------------------------------------------------------------------------
# reductions and shape
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return _record(a.data.sum(axis=axes, keepdims=keepdims), (a,), bw)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axes, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return _record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))
    return _record(np.ascontiguousarray(a.data.transpose(axes)), (a,),
                   lambda g: (g.transpose(inv),))


def _basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape, dtype = a.shape, a.dtype
    if isinstance(idx, Tensor):
        idx = idx.data.astype(np.int64)

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        if _basic_index(idx):
            z[idx] += g
        else:
            np.add.at(z, idx, g)
        return (z,)

    return _record(np.array(a.data[idx]), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands must be at least 2-D")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {ad.shape} @ {bd.shape}")

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _record(ad @ bd, (a, b), bw)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return _record(out, (a,),
                   lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
    return _record(out, (a,),
                   lambda g: (g - np.exp(out) * g.sum(axis=axis, keepdims=True),))


def embedding(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    shape, dtype = weight.shape, weight.dtype

    def bw(g):
        z = np.zeros(shape, dtype=dtype)
        np.add.at(z, ids.reshape(-1), g.reshape(-1, shape[-1]))
        return (z,)

    return _record(weight.data[ids], (weight,), bw)


# ---------------------------------------------------------------------------
# spatial
# ---------------------------------------------------------------------------

def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input and FCkHkW kernel.

    Output spatial size is ``(H + 2*pad - kH) // stride + 1`` per axis.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape}, {kernel.shape}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if c != kc:
        raise ShapeError(f"conv2d channel mismatch: input {c}, kernel {kc}")
    if stride < 1 or pad < 0:
        raise ShapeError("conv2d needs stride >= 1 and pad >= 0")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d output would be empty ({ho}x{wo})")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # columns laid out [n, c*kh*kw, ho*wo] so the product lands directly in NCHW
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    kmat = kernel.data.reshape(f, -1)
    out = (kmat @ cols).reshape(n, f, ho, wo)

    def bw(g):
        g2 = g.reshape(n, f, ho * wo)
        gk = (g2 @ cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) \
            if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (kmat.T @ g2).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros(xp.shape, dtype=x.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        return gx, gk

    return _record(np.ascontiguousarray(out), (x, kernel), bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour doubling of the last two axes."""
    shape = x.shape
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        lead = shape[:-2]
        return (g.reshape(*lead, shape[-2], 2, shape[-1], 2).sum(axis=(-3, -1)),)

    return _record(out, (x,), bw)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], point, eps: float = 1e-3,
               floor: float = 1e-8) -> float:
    """Max relative error between autodiff and central differences.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor. The error
    per coordinate is ``|a - n| / max(|a|, |n|, floor)``. Autodiff runs in the
    dtype of ``point``; the finite differences always probe ``f`` in float64
    with the five-point stencil, so a float32 check measures the float32
    gradient rather than the noise of float32 differencing. The stencil's
    error is about ``h**4`` truncation plus ``1e-16 * |f| / h`` rounding, which
    is smallest near the default ``eps``.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    base = np.array(point.data if isinstance(point, Tensor) else point)
    if base.dtype.kind != "f":
        base = base.astype(DEFAULT_DTYPE)
    with GradTape() as tape:
        x = Tensor(base.copy(), requires_grad=True, dtype=base.dtype)
        y = f(x)
    if y.data.size != 1:
        raise ContractError("grad_check needs a scalar-valued function")
    tape.backward(y)
    auto = (x.grad if x.grad is not None else np.zeros_like(base)).astype(np.float64)
    probe = base.astype(np.float64)
    num = np.zeros_like(probe)
    flat = probe.reshape(-1)
    num_flat = num.reshape(-1)
    def at(i: int, offset: float) -> float:
        orig = flat[i]
        flat[i] = orig + offset
        value = float(f(Tensor(probe.copy(), dtype=np.float64)).data)
        flat[i] = orig
        if not np.isfinite(value):
            raise NumericError(f"non-finite value while probing coordinate {i}")
        return value

    for i in range(flat.size):
        num_flat[i] = (8 * (at(i, eps) - at(i, -eps)) - (at(i, 2 * eps) - at(i, -2 * eps))) / (12 * eps)
    if not np.all(np.isfinite(auto)):
        raise NumericError("non-finite autodiff gradient")
    denom = np.maximum(np.maximum(np.abs(auto), np.abs(num)), floor)
    return float(np.max(np.abs(auto - num) / denom))
