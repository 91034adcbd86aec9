"""Minimal dense tensor library with reverse-mode automatic differentiation.

Tensors wrap row-major numpy arrays (float32 by default, float64 for
gradient checks). Differentiable ops record themselves on a global Tape
while recording is enabled; ``backward`` replays the tape in reverse
construction order. Every op validates that its output is finite.
"""

from __future__ import annotations

import math
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DEFAULT_DTYPE = np.float32

__all__ = [
    "Tensor",
    "Tape",
    "tensor",
    "zeros",
    "ones",
    "randn",
    "no_grad",
    "is_grad_enabled",
    "backward",
    "matmul",
    "softmax",
    "layernorm",
    "gelu",
    "concat",
    "split",
    "gather_frames",
    "AdamW",
]


class TensorError(ValueError):
    """Shape mismatch or other tensor-level contract violation."""


class Tape:
    """Ordered record of differentiable ops, appended at construction time."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.recording = True

    def clear(self) -> None:
        self.nodes.clear()


_TAPE = Tape()


def get_tape() -> Tape:
    return _TAPE


def is_grad_enabled() -> bool:
    return _TAPE.recording


@contextmanager
def no_grad():
    prev = _TAPE.recording
    _TAPE.recording = False
    try:
        yield
    finally:
        _TAPE.recording = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise TensorError(f"non-finite values produced by op '{op}'")


def _as_array(value, dtype) -> np.ndarray:
    arr = np.asarray(value, dtype=dtype)
    return np.ascontiguousarray(arr)


class Tensor:
    """Dense n-d array, optionally tracked for reverse-mode differentiation."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str = ""):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else DEFAULT_DTYPE
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "tensor")
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], None] | None = None
        self.name = name

    # -- basic introspection ------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}, grad={self.requires_grad})"

    # -- autodiff plumbing --------------------------------------------------

    def _accumulate(self, grad: np.ndarray) -> None:
        if self.grad is None:
            self.grad = grad.astype(self.data.dtype, copy=True)
        else:
            self.grad += grad

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        """Tensor sharing this one's values but cut off from the tape."""
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    # -- operator sugar -----------------------------------------------------

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __radd__(self, other):
        return add(_coerce(other, self), self)

    def __sub__(self, other):
        return add(self, scale(_coerce(other, self), -1.0))

    def __rsub__(self, other):
        return add(_coerce(other, self), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, 1.0 / float(other))
        return mul(self, reciprocal(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        return reshape(self, *shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.data.dtype))


def tensor(data, requires_grad: bool = False, dtype=None, name: str = "") -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, dtype=None, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def randn(rng: np.random.Generator, shape, scale_: float = 1.0, dtype=None, requires_grad: bool = False) -> Tensor:
    data = rng.standard_normal(shape) * scale_
    return Tensor(data.astype(dtype or DEFAULT_DTYPE), requires_grad=requires_grad)


def _make_op(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    _check_finite(out_data, op)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = False
    out.grad = None
    out.name = ""
    if _TAPE.recording and any(p.requires_grad or p._backward_fn is not None or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
        _TAPE.nodes.append(out)
    else:
        out._parents = ()
        out._backward_fn = None
    return out


def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or t._backward_fn is not None or bool(t._parents)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum-reduce a gradient back to the shape of a broadcast operand."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (g, s) in enumerate(zip(grad.shape, shape)) if s == 1 and g != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def backward(loss: Tensor) -> None:
    """Propagate gradients from a scalar loss through the recorded tape.

    Visits tape nodes in reverse construction order exactly once;
    parameters unreachable from the loss keep whatever grad they had
    (zero_grad them first for the exact-zero contract).
    """
    if loss.size != 1:
        raise TensorError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._backward_fn is None and not loss._parents:
        raise TensorError("loss is not connected to the tape")
    try:
        stop = _TAPE.nodes.index(loss)
    except ValueError:
        raise TensorError("loss is not on the active tape") from None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(_TAPE.nodes[: stop + 1]):
        if node.grad is None or node._backward_fn is None:
            continue
        node._backward_fn(node.grad)
    # intermediate grads are not needed after the pass
    for node in _TAPE.nodes[: stop + 1]:
        if node._backward_fn is not None:
            node.grad = None


# -- elementwise and structural ops -----------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data + b.data

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(_unbroadcast(g, a.shape))
        if _needs_grad(b):
            b._accumulate(_unbroadcast(g, b.shape))

    return _make_op(out_data, (a, b), bwd, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out_data = a.data * b.data

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if _needs_grad(b):
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return _make_op(out_data, (a, b), bwd, "mul")


def scale(a: Tensor, s: float) -> Tensor:
    out_data = a.data * s

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(g * s)

    return _make_op(out_data, (a,), bwd, "scale")


def reciprocal(a: Tensor) -> Tensor:
    out_data = 1.0 / a.data

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(-g * out_data * out_data)

    return _make_op(out_data, (a,), bwd, "reciprocal")


def texp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(g * out_data)

    return _make_op(out_data, (a,), bwd, "exp")


def tsqrt(a: Tensor) -> Tensor:
    out_data = np.sqrt(a.data)

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(g * 0.5 / out_data)

    return _make_op(out_data, (a,), bwd, "sqrt")


def gelu(a: Tensor) -> Tensor:
    """Exact (erf-based) GELU."""
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / math.sqrt(2.0)))
    out_data = (x * cdf).astype(x.dtype)

    def bwd(g):
        if _needs_grad(a):
            pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
            a._accumulate(g * (cdf + x * pdf).astype(x.dtype))

    return _make_op(out_data, (a,), bwd, "gelu")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out_data = a.data @ b.data

    def bwd(g):
        if _needs_grad(a):
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.shape))
        if _needs_grad(b):
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.shape))

    return _make_op(out_data, (a, b), bwd, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if _needs_grad(a):
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a._accumulate(out_data * (g - dot))

    return _make_op(out_data, (a,), bwd, "softmax")


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalization over the last axis, followed by affine gain/bias."""
    if eps <= 0:
        raise TensorError("layernorm eps must be > 0")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def bwd(g):
        if _needs_grad(gain):
            axes = tuple(range(g.ndim - 1))
            gain._accumulate((g * xhat).sum(axis=axes))
        if _needs_grad(bias):
            axes = tuple(range(g.ndim - 1))
            bias._accumulate(g.sum(axis=axes))
        if _needs_grad(x):
            gh = g * gain.data
            m1 = gh.mean(axis=-1, keepdims=True)
            m2 = (gh * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (gh - m1 - xhat * m2))

    return _make_op(out_data, (x, gain, bias), bwd, "layernorm")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    parts = list(tensors)
    out_data = np.concatenate([t.data for t in parts], axis=axis)
    sizes = [t.shape[axis] for t in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if _needs_grad(t):
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return _make_op(out_data, parts, bwd, "concat")


def split(a: Tensor, sizes: Sequence[int], axis: int) -> list[Tensor]:
    if sum(sizes) != a.shape[axis]:
        raise TensorError(f"split sizes {sizes} do not cover axis {axis} of {a.shape}")
    offsets = np.cumsum([0] + list(sizes))
    outs = []
    for lo, hi in zip(offsets[:-1], offsets[1:]):
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(int(lo), int(hi))
        idx = tuple(idx)
        piece = np.ascontiguousarray(a.data[idx])

        def bwd(g, idx=idx):
            if _needs_grad(a):
                full = np.zeros_like(a.data)
                full[idx] = g
                a._accumulate(full)

        outs.append(_make_op(piece, (a,), bwd, "split"))
    return outs


def gather_frames(a: Tensor, indices: Sequence[int], axis: int = 1) -> Tensor:
    """Select frames (or any slices) along an axis by index list."""
    idx = np.asarray(indices, dtype=np.int64)
    out_data = np.take(a.data, idx, axis=axis)

    def bwd(g):
        if _needs_grad(a):
            full = np.zeros_like(a.data)
            np.add.at(full, tuple([slice(None)] * axis + [idx]), g)
            a._accumulate(full)

    return _make_op(out_data, (a,), bwd, "gather_frames")


def reshape(a: Tensor, *shape) -> Tensor:
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out_data = a.data.reshape(shape)

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(g.reshape(a.shape))

    return _make_op(out_data, (a,), bwd, "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out_data = np.ascontiguousarray(np.transpose(a.data, axes))
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(np.transpose(g, inv))

    return _make_op(out_data, (a,), bwd, "transpose")


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out_data = a.data.sum(axis=axis, keepdims=keepdims)
    out_data = np.asarray(out_data, dtype=a.data.dtype)

    def bwd(g):
        if not _needs_grad(a):
            return
        if axis is None:
            a._accumulate(np.broadcast_to(g, a.shape).copy())
        else:
            ax = axis if isinstance(axis, tuple) else (axis,)
            gg = g if keepdims else np.expand_dims(g, ax)
            a._accumulate(np.broadcast_to(gg, a.shape).copy())

    return _make_op(out_data, (a,), bwd, "sum")


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        ax = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in ax]))
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def clamp01(a: Tensor) -> Tensor:
    """Clamp to [0, 1]; gradient is zero outside the open interval."""
    out_data = np.clip(a.data, 0.0, 1.0)
    mask = ((a.data > 0.0) & (a.data < 1.0)).astype(a.data.dtype)

    def bwd(g):
        if _needs_grad(a):
            a._accumulate(g * mask)

    return _make_op(out_data, (a,), bwd, "clamp01")


# -- optimizer ---------------------------------------------------------------


class AdamW:
    """AdamW with bias correction and decoupled weight decay."""

    def __init__(self, params: Iterable[Tensor], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        if lr <= 0:
            raise ValueError("lr must be > 0")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.betas
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            if self.weight_decay:
                p.data -= self.lr * self.weight_decay * p.data
            p.data -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt.m.{i}"] = m
            out[f"opt.v.{i}"] = v
        return out
