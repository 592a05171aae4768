"""A small reverse-mode automatic differentiation engine over float64 arrays.

Each :class:`Tensor` owns a numpy ``float64`` array. Operations build a graph
of closures; :func:`backward` walks it in reverse topological order and
accumulates gradients into leaf tensors that require them. Non-trainable
:class:`Parameter` objects never receive a gradient.

Conventions:

* convolution is cross-correlation with zero padding;
* bilinear resize uses the align-corners-false convention (pixel centres at
  ``i + 0.5``; source coordinates below zero are clamped to zero), nearest
  resize maps output index ``i`` to input index ``floor(i * in / out)``;
* gradients accumulate across :func:`backward` calls until cleared with
  :func:`zero_grad`.
"""

from __future__ import annotations

import contextlib
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DimensionError, NonFiniteError, UsageError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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
        if self.data.size != 1:
            raise UsageError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

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


class Parameter(Tensor):
    """A named leaf tensor that an optimizer may update when trainable."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = "", trainable: bool = True):
        super().__init__(np.array(data, dtype=np.float64), requires_grad=trainable)
        self.name = name

    @property
    def trainable(self) -> bool:
        return self.requires_grad

    @trainable.setter
    def trainable(self, flag: bool) -> None:
        self.requires_grad = bool(flag)
        if not flag:
            self.grad = None

    @property
    def value(self) -> Tensor:
        return self

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, trainable={self.trainable})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(data: np.ndarray, op: str) -> None:
    # the sum is NaN/Inf whenever any entry is; the exact test only runs on that path
    if not np.isfinite(data.sum()) and not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced a non-finite value")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    _check_finite(data, op)
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return _make(a.data / b.data, (a, b), bw, "div")


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)

    def bw(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make(a.data**p, (a,), bw, "power")


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)

    def bw(g):
        return (g * y,)

    return _make(y, (a,), bw, "exp")


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return (g / a.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        y = np.log(a.data)
    return _make(y, (a,), bw, "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0

    def bw(g):
        return (g * mask,)

    return _make(np.where(mask, a.data, 0.0), (a,), bw, "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = 0.5 * (1.0 + np.tanh(0.5 * a.data))

    def bw(g):
        return (g * y * (1.0 - y),)

    return _make(y, (a,), bw, "sigmoid")


# ----------------------------------------------------------------- reductions


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _make(np.asarray(y), (a,), bw, "sum")


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    y = a.data.mean(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).copy(),)

    return _make(np.asarray(y), (a,), bw, "mean")


# -------------------------------------------------------------------- shaping


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def bw(g):
        return (g.reshape(src),)

    return _make(a.data.reshape(shape), (a,), bw, "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return (g.transpose(inv),)

    return _make(a.data.transpose(axes), (a,), bw, "transpose")


# --------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product of a 2-D ``a`` with a 2-D or 1-D ``b``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionError(f"matmul expects 2-D @ 1-D/2-D, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        if b.ndim == 1:
            return np.outer(g, b.data), a.data.T @ g
        return g @ b.data.T, a.data.T @ g

    return _make(a.data @ b.data, (a, b), bw, "matmul")


# ------------------------------------------------------------------ softmax


def _softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(a, axis: int = -1) -> Tensor:
    """Softmax along ``axis`` with max-subtraction for stability."""
    a = as_tensor(a)
    y = _softmax_np(a.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (a,), bw, "softmax")


# ------------------------------------------------------------- convolution


def conv_out_extent(n: int, k: int, stride: int, pad: int) -> int:
    span = n + 2 * pad - k
    if span < 0:
        raise ConfigurationError(f"kernel {k} larger than padded extent {n + 2 * pad}")
    if span % stride:
        raise ConfigurationError(
            f"non-integral output extent: ({n} + 2*{pad} - {k}) / {stride} is not an integer"
        )
    return span // stride + 1


def unfold(x, k: int, stride: int = 1, pad: int = 0) -> Tensor:
    """im2col: ``x`` (N, C, H, W) -> patches (N*H'*W', C*k*k).

    Row order is (n, i, j); column order is (c, ki, kj), matching a kernel
    of shape (F, C, k, k) flattened to (F, C*k*k).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"unfold expects (N, C, H, W), got {x.shape}")
    n, c, h, w = x.shape
    ho = conv_out_extent(h, k, stride, pad)
    wo = conv_out_extent(w, k, stride, pad)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    # channels-last windows come out as (n, i, j, c, ki, kj) with no transpose
    xl = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    win = sliding_window_view(xl, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    cols = win.reshape(n * ho * wo, c * k * k)

    def bw(g):
        # accumulate in channels-last layout so g needs no transposed copy
        g6 = g.reshape(n, ho, wo, c, k, k)
        acc = np.zeros((n, xp.shape[2], xp.shape[3], c))
        for i in range(k):
            for j in range(k):
                acc[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += g6[..., i, j]
        dxp = acc.transpose(0, 3, 1, 2)
        if pad:
            dxp = dxp[:, :, pad:-pad, pad:-pad]
        return (dxp,)

    return _make(cols, (x,), bw, "unfold")


def fold_output(y, n: int, ho: int, wo: int) -> Tensor:
    """(N*H'*W', F) matmul output -> (N, F, H', W')."""
    f = y.shape[1]
    return transpose(reshape(y, (n, ho, wo, f)), (0, 3, 1, 2))


def conv2d(x, kernels, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (C, H, W) or (N, C, H, W) with (F, C, k, k) kernels."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if kernels.ndim != 4 or kernels.shape[2] != kernels.shape[3]:
        raise DimensionError(f"kernels must be (F, C, k, k), got {kernels.shape}")
    f, c, k, _ = kernels.shape
    if x.shape[1] != c:
        raise DimensionError(f"input has {x.shape[1]} channels, kernels expect {c}")
    n, _, h, w = x.shape
    ho, wo = conv_out_extent(h, k, stride, pad), conv_out_extent(w, k, stride, pad)
    cols = unfold(x, k, stride, pad)
    y = matmul(cols, transpose(reshape(kernels, (f, c * k * k))))
    if bias is not None:
        y = add(y, bias)
    out = fold_output(y, n, ho, wo)
    return reshape(out, out.shape[1:]) if single else out


# ------------------------------------------------------------------ resize


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    """(n_out, n_in) matrix mapping a 1-D signal to its resized version."""
    if n_out < 1 or n_in < 1:
        raise ConfigurationError(f"resize extents must be >= 1, got {n_in} -> {n_out}")
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    if mode == "nearest":
        src = np.minimum((rows * n_in) // n_out, n_in - 1)
        m[rows, src] = 1.0
    elif mode == "bilinear":
        pos = (rows + 0.5) * (n_in / n_out) - 0.5
        pos = np.maximum(pos, 0.0)
        i0 = np.minimum(np.floor(pos).astype(int), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        frac = pos - i0
        np.add.at(m, (rows, i0), 1.0 - frac)
        np.add.at(m, (rows, i1), frac)
    else:
        raise ConfigurationError(f"unknown resize mode {mode!r}")
    m.setflags(write=False)
    return m


def _separable(x: np.ndarray, rh: np.ndarray, rw: np.ndarray) -> np.ndarray:
    """``rh @ x @ rw.T`` over the trailing two axes, as two flat GEMMs."""
    lead = x.shape[:-2]
    h, w = x.shape[-2:]
    m = int(np.prod(lead)) if lead else 1
    t = x.reshape(m * h, w) @ rw.T
    nw = t.shape[1]
    t = t.reshape(m, h, nw).transpose(1, 0, 2).reshape(h, m * nw)
    t = (rh @ t).reshape(rh.shape[0], m, nw).transpose(1, 0, 2)
    return np.ascontiguousarray(t).reshape(lead + (rh.shape[0], nw))


def resize(x, new_h: int, new_w: int, mode: str = "bilinear") -> Tensor:
    """Resize the two trailing axes of ``x`` (.., H, W) to (new_h, new_w)."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    rh = interp_matrix(h, int(new_h), mode)
    rw = interp_matrix(w, int(new_w), mode)
    y = _separable(x.data, rh, rw)

    def bw(g):
        return (_separable(g, rh.T, rw.T),)

    return _make(y, (x,), bw, "resize")


# ------------------------------------------------------------------ backward


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient."""
    if loss.size != 1:
        raise UsageError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.array(g, dtype=np.float64).reshape(node.shape)
            else:
                node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if eps <= 0:
        raise ConfigurationError("eps must be positive")
    base = np.array(as_tensor(x).data, dtype=np.float64)
    flat = base.reshape(-1)
    out = np.zeros_like(flat)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = as_tensor(f(Tensor(base.copy()))).item()
            flat[i] = orig - eps
            lo = as_tensor(f(Tensor(base.copy()))).item()
            flat[i] = orig
            out[i] = (hi - lo) / (2.0 * eps)
    return Tensor(out.reshape(base.shape))
