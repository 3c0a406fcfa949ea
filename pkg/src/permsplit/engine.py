"""Dense float tensors with a recording tape for reverse-mode differentiation.

Values are numpy arrays, float32 by default (float64 is available for
high-precision verification). Operations on grad-requiring inputs link the
result back to its parents, forming an implicit acyclic tape; `backward`
replays the tape in reverse topological order and leaves gradients on the
reachable leaves. Reductions (matmul, sum, mean, softmax) accumulate in
float64 before rounding to the storage dtype so that summation-order effects
stay below storage precision; with single-threaded loops this makes runs
bit-reproducible under a fixed seed.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf as _erf

__all__ = [
    "Tensor", "ShapeError", "GraphError", "no_grad", "tensor", "parameter",
    "backward", "add", "sub", "mul", "div", "neg", "matmul", "relu",
    "sigmoid", "gelu", "softplus", "exp", "log", "sqrt", "pow_const",
    "softmax", "tsum", "tmean", "reshape", "transpose", "gather_rows",
    "im2col", "upsample_nearest", "layer_norm", "bce_with_logits",
]

FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class GraphError(RuntimeError):
    """Misuse of the differentiation tape (e.g. non-scalar loss)."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _contig(arr: np.ndarray) -> np.ndarray:
    # ascontiguousarray would promote 0-d to 1-d; keep scalar shapes intact
    if arr.ndim == 0 or arr.flags["C_CONTIGUOUS"]:
        return arr
    return np.ascontiguousarray(arr)


def _as_array(data, dtype=None) -> np.ndarray:
    if dtype is None:
        if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
            return _contig(data)
        return _contig(np.asarray(data, dtype=np.float32))
    return _contig(np.asarray(data, dtype=dtype))


class Tensor:
    """A dense float array plus optional tape links.

    Leaves are tensors created directly from data; `parameter` marks a leaf
    as a named, trainable graph input. Frozen leaves (requires_grad=False)
    never receive gradients.
    """

    __slots__ = ("data", "grad", "requires_grad", "name", "trainable",
                 "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, name=None, dtype=None,
                 trainable=False):
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.trainable = bool(trainable)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # operator sugar; non-Tensor operands become constants of matching dtype
    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __rsub__(self, other):
        return sub(_coerce(other, self), self)

    def __mul__(self, other):
        return mul(self, _coerce(other, self))

    def __rmul__(self, other):
        return mul(_coerce(other, self), self)

    def __truediv__(self, other):
        return div(self, _coerce(other, self))

    def __rtruediv__(self, other):
        return div(_coerce(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def tensor(data, dtype=None) -> Tensor:
    return Tensor(data, dtype=dtype)


def parameter(data, name: str, trainable: bool = True, dtype=None) -> Tensor:
    """Named leaf tensor; trainable leaves receive gradients, frozen ones don't."""
    return Tensor(data, requires_grad=trainable, name=name, dtype=dtype,
                  trainable=trainable)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _result_dtype(*tensors: Tensor):
    if any(t.data.dtype == np.float64 for t in tensors):
        return np.float64
    return np.float32


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, inverting numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)), dtype=np.float64)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True, dtype=np.float64)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(data, (a, b), vjp)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def vjp(g):
        return (_unbroadcast(g * b.data, a.shape),
                _unbroadcast(g * a.data, b.shape))

    return _make(data, (a, b), vjp)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def vjp(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# matmul


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(
            f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul inner dimensions disagree: {a.shape} x {b.shape}")
    dt = _result_dtype(a, b)
    a64 = a.data.astype(np.float64, copy=False)
    b64 = b.data.astype(np.float64, copy=False)
    data = np.matmul(a64, b64).astype(dt)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g64, b64.swapaxes(-1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(a64.swapaxes(-1, -2), g64), b.shape)
        return ga, gb

    return _make(data, (a, b), vjp)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def vjp(g):
        return (g * (a.data > 0),)

    return _make(data, (a,), vjp)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    z = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z)).astype(x.dtype)

    def vjp(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    # exact erf form
    x = a.data
    e = _erf(x * _INV_SQRT2)
    data = (0.5 * x * (1.0 + e)).astype(x.dtype)

    def vjp(g):
        pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
        return (g * (0.5 * (1.0 + e) + x * pdf),)

    return _make(data, (a,), vjp)


def softplus(a: Tensor) -> Tensor:
    x = a.data
    data = (np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))).astype(x.dtype)

    def vjp(g):
        z = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
        return (g * sig,)

    return _make(data, (a,), vjp)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)
    return _make(data, (a,), lambda g: (g * data,))


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)
    return _make(data, (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    data = np.sqrt(a.data)
    return _make(data, (a,), lambda g: (g * 0.5 / data,))


def pow_const(a: Tensor, p: float) -> Tensor:
    data = a.data ** p
    return _make(data, (a,), lambda g: (g * p * a.data ** (p - 1.0),))


# ---------------------------------------------------------------------------
# reductions and shape movement


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims,
                  dtype=np.float64).astype(a.data.dtype)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.shape).astype(a.data.dtype),)

    return _make(data, (a,), vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    axes = _norm_axis(axis, a.data.ndim)
    count = int(np.prod([a.shape[i] for i in axes]))
    data = (np.sum(a.data, axis=axes, keepdims=keepdims, dtype=np.float64)
            / count).astype(a.data.dtype)

    def vjp(g):
        gg = g
        if not keepdims:
            gg = np.expand_dims(g, axes)
        return (np.broadcast_to(gg / count, a.shape).astype(a.data.dtype),)

    return _make(data, (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    return _make(data, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    data = np.ascontiguousarray(a.data.transpose(axes))
    return _make(data, (a,), lambda g: (g.transpose(inv),))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-stabilized softmax: max subtraction, float64 accumulation."""
    ax = axis % a.data.ndim
    x64 = a.data.astype(np.float64, copy=False)
    shifted = x64 - x64.max(axis=ax, keepdims=True)
    e = np.exp(shifted)
    data = (e / e.sum(axis=ax, keepdims=True)).astype(a.data.dtype)

    def vjp(g):
        g64 = g.astype(np.float64, copy=False)
        s64 = data.astype(np.float64, copy=False)
        inner = (g64 * s64).sum(axis=ax, keepdims=True)
        return ((s64 * (g64 - inner)).astype(a.data.dtype),)

    return _make(data, (a,), vjp)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Reorder rows along the second-to-last axis: out[..., i, :] = a[..., index[..., i], :].

    `index` is either 1-D (shared across leading axes) or shaped like
    a.shape[:-1]. Backward scatter-adds, so bijective indices move gradient
    rows exactly.
    """
    idx = np.asarray(index)
    if a.data.ndim < 2:
        raise ShapeError(f"gather_rows needs rank >= 2 input, got {a.shape}")
    n = a.shape[-2]
    if idx.shape[-1] != n:
        raise ShapeError(
            f"index length {idx.shape[-1]} != row count {n} of {a.shape}")
    if idx.ndim == 1:
        full = np.broadcast_to(idx, a.shape[:-1])
    elif idx.shape == a.shape[:-1]:
        full = idx
    else:
        raise ShapeError(
            f"index shape {idx.shape} incompatible with input {a.shape}")
    data = np.take_along_axis(a.data, full[..., None], axis=-2)

    def vjp(g):
        out = np.zeros_like(a.data)
        flat_g = g.reshape(-1, n, a.shape[-1])
        flat_o = out.reshape(-1, n, a.shape[-1])
        flat_i = np.broadcast_to(full, a.shape[:-1]).reshape(-1, n)
        for b in range(flat_g.shape[0]):
            np.add.at(flat_o[b], flat_i[b], flat_g[b])
        return (out,)

    return _make(data, (a,), vjp)


def im2col(a: Tensor, kh: int, kw: int, stride: int = 1, pad: int = 0) -> Tensor:
    """Extract sliding windows from [B,C,H,W] into [B, OH*OW, C*kh*kw].

    Windows are ordered raster-wise over the output grid; each window vector
    is channel-major, then kernel-row, then kernel-col. Pure data movement,
    so the backward scatter is exact.
    """
    if a.data.ndim != 4:
        raise ShapeError(f"im2col expects [B,C,H,W], got {a.shape}")
    B, C, H, W = a.shape
    xp = np.pad(a.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else a.data
    Hp, Wp = xp.shape[2], xp.shape[3]
    if Hp < kh or Wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {Hp}x{Wp}")
    oh = (Hp - kh) // stride + 1
    ow = (Wp - kw) // stride + 1
    s = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (B, C, oh, ow, kh, kw),
        (s[0], s[1], s[2] * stride, s[3] * stride, s[2], s[3]))
    data = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
        B, oh * ow, C * kh * kw)

    def vjp(g):
        g6 = g.reshape(B, oh, ow, C, kh, kw).transpose(0, 3, 1, 2, 4, 5)
        gx = np.zeros((B, C, Hp, Wp), dtype=a.data.dtype)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + oh * stride:stride, j:j + ow * stride:stride] \
                    += g6[:, :, :, :, i, j]
        if pad:
            gx = gx[:, :, pad:Hp - pad, pad:Wp - pad]
        return (gx,)

    return _make(data, (a,), vjp)


def upsample_nearest(a: Tensor, factor: int) -> Tensor:
    """Nearest-neighbor upsampling of [B,C,H,W] by an integer factor."""
    if a.data.ndim != 4:
        raise ShapeError(f"upsample_nearest expects [B,C,H,W], got {a.shape}")
    data = a.data.repeat(factor, axis=2).repeat(factor, axis=3)
    B, C, H, W = a.shape

    def vjp(g):
        return (g.reshape(B, C, H, factor, W, factor)
                 .sum(axis=(3, 5), dtype=np.float64).astype(a.data.dtype),)

    return _make(data, (a,), vjp)


# ---------------------------------------------------------------------------
# composites


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    if eps <= 0:
        raise ValueError(f"layer_norm eps must be positive, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"layer_norm affine shapes {gamma.shape}/{beta.shape} != ({d},)")
    mu = tmean(x, axis=-1, keepdims=True)
    centered = sub(x, mu)
    var = tmean(mul(centered, centered), axis=-1, keepdims=True)
    inv = div(centered, sqrt(var + eps))
    return add(mul(inv, gamma), beta)


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Elementwise binary cross-entropy on logits: softplus(z) - z*y.

    Stable for any logit magnitude; gradient w.r.t. z is sigmoid(z) - y.
    """
    return sub(softplus(logits), mul(logits, targets))


# ---------------------------------------------------------------------------
# backward


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def backward(loss: Tensor, params: Sequence[Tensor] | None = None
             ) -> dict[str, np.ndarray]:
    """Reverse-mode differentiation from a scalar loss.

    Leaves every reachable grad-requiring leaf with a fresh `.grad` array and
    returns {name: grad} for the named ones. Frozen leaves are skipped.
    """
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any grad-requiring tensor")
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    named: dict[str, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g
            if node.name is not None:
                named[node.name] = g
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            pg = np.asarray(pg, dtype=parent.data.dtype)
            slot = grads.get(id(parent))
            grads[id(parent)] = pg if slot is None else slot + pg
    if params is not None:
        return {p.name: p.grad for p in params
                if p.requires_grad and p.grad is not None and p.name}
    return named
