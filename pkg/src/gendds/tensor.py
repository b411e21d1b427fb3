"""Dense tensors with define-by-run reverse-mode differentiation.

Every differentiable operation appends a node to the calling thread's
:class:`ComputationTape`; :meth:`Tensor.backward` walks the tape in reverse,
accumulates gradients into leaves that require them, and then resets the tape.

Batched matrix products always keep the batch as a stacked leading axis so
that the result for one sample does not depend on the batch it travels in.
"""

from __future__ import annotations

import contextlib
import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy import special

from .errors import ContractError, DimensionError, ConfigurationError

DEFAULT_DTYPE = np.float32


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class ComputationTape:
    """Ordered record of executed differentiable ops for one thread."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.enabled = True

    def record(self, out: "Tensor", inputs: tuple, backward: Callable) -> None:
        self.nodes.append(_Node(out, inputs, backward))

    def reset(self) -> None:
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)

    def backward(self, loss: "Tensor") -> None:
        if loss.data.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if not self.nodes or not loss._from_op:
            raise ContractError("backward() called with an empty tape; nothing to differentiate")
        grads = {id(loss): np.ones_like(loss.data)}
        try:
            for node in reversed(self.nodes):
                g = grads.pop(id(node.out), None)
                if g is None:
                    continue
                input_grads = node.backward(g)
                for inp, ig in zip(node.inputs, input_grads):
                    if ig is None or not inp.requires_grad:
                        continue
                    if inp._from_op:
                        prev = grads.get(id(inp))
                        grads[id(inp)] = ig if prev is None else prev + ig
                    elif inp.grad is None:
                        inp.grad = np.array(ig, dtype=inp.data.dtype, copy=True)
                    else:
                        inp.grad += ig
        finally:
            self.reset()


_local = threading.local()


def current_tape() -> ComputationTape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = ComputationTape()
    return tape


@contextlib.contextmanager
def no_grad():
    tape = current_tape()
    prev = tape.enabled
    tape.enabled = False
    try:
        yield
    finally:
        tape.enabled = prev


def is_grad_enabled() -> bool:
    return current_tape().enabled


class Tensor:
    """An n-dimensional array that can take part in gradient computation."""

    __slots__ = ("data", "requires_grad", "grad", "_from_op", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._from_op = False

    # -- basic introspection -------------------------------------------------
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
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self) -> None:
        current_tape().backward(self)

    # -- operator sugar ------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

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


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None and isinstance(x, (int, float)):
        return Tensor(np.asarray(x, dtype=DEFAULT_DTYPE))
    return Tensor(x, dtype=dtype)


def _coerce_pair(a, b):
    """Wrap python scalars so they adopt the dtype of the tensor operand."""
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _make(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._from_op = False
    out.requires_grad = False
    tape = current_tape()
    if tape.enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._from_op = True
        tape.record(out, tuple(inputs), backward)
    return out


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    """Only one operand may be expanded, aligned on trailing dimensions."""
    try:
        shape = np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible") from None
    if shape != a and shape != b:
        raise DimensionError(f"shapes {a} and {b} would both need expanding")
    return shape


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    _broadcast_shape(a.shape, b.shape)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), backward)


def scale(x: Tensor, factor: float) -> Tensor:
    """Multiply by a constant that is not itself differentiated."""
    factor = x.data.dtype.type(factor)
    return _make(x.data * factor, (x,), lambda g: (g * factor,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g / (2 * out),))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def sigmoid(x: Tensor) -> Tensor:
    out = special.expit(x.data)
    return _make(out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def silu(x: Tensor) -> Tensor:
    sig = special.expit(x.data)
    out = x.data * sig

    def backward(g):
        return (g * (sig * (1 + x.data * (1 - sig))),)

    return _make(out, (x,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x), using erf."""
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out = (x.data * cdf).astype(x.dtype, copy=False)

    def backward(g):
        pdf = np.exp(-0.5 * x.data * x.data) * _INV_SQRT2PI
        return (g * (cdf + x.data * pdf),)

    return _make(out, (x,), backward)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    out = np.clip(x.data, lo, hi)
    mask = (x.data >= lo) & (x.data <= hi)
    return _make(out, (x,), lambda g: (g * mask,))


def elementwise(x, op: str, other=None) -> Tensor:
    """Dispatch by name: add, mul, silu, gelu, scale."""
    if op == "add":
        return add(x, other)
    if op == "mul":
        return mul(x, other)
    if op == "silu":
        return silu(x)
    if op == "gelu":
        return gelu(x)
    if op == "scale":
        return scale(x, other)
    raise ConfigurationError(f"unknown elementwise op {op!r}")


# -- reductions and shape manipulation ---------------------------------------------

def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.mean(x.data, axis=axis, keepdims=keepdims)
    count = x.size // max(np.asarray(out).size, 1)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / x.dtype.type(count), x.shape),)

    return _make(np.asarray(out, dtype=x.dtype), (x,), backward)


def reshape(x: Tensor, shape) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None))) or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def backward(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), backward)


def upsample_nearest(x: Tensor, factor: int = 2) -> Tensor:
    """Repeat every pixel of a [B, C, H, W] tensor ``factor`` times per axis."""
    b, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (b, c, h, factor, w, factor))
    out = out.reshape(b, c, h * factor, w * factor)

    def backward(g):
        return (g.reshape(b, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return _make(out, (x,), backward)


def embedding(ids: np.ndarray, table: Tensor) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), backward)


# -- linear algebra ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` is ``[..., m, k]``; ``b`` is either a single ``[k, n]`` matrix shared
    across the batch or a stack with exactly the same leading dims as ``a``.
    """
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} @ {b.shape}")
    # contiguous operands keep the BLAS path, and so the rounding, independent of layout
    out = np.matmul(np.ascontiguousarray(a.data), np.ascontiguousarray(b.data))

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.requires_grad:
            if shared:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as ``[out, in]``.

    A 2-D input ``[B, in]`` is computed as ``B`` independent row products so the
    result for a row does not depend on how many rows share the call.
    """
    if x.shape[-1] != weight.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {weight.shape}")
    lead = x.shape[:-1]
    if x.ndim == 1:
        xs = x.data.reshape(1, 1, -1)
    elif x.ndim == 2:
        xs = x.data[:, None, :]
    else:
        xs = x.data.reshape(lead[0], -1, x.shape[-1])
    xs = np.ascontiguousarray(xs)
    out = np.matmul(xs, weight.data.T)
    if bias is not None:
        out = out + bias.data
    out = out.reshape(*lead, weight.shape[0])
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, weight.shape[0])
        gx = (g2 @ weight.data).reshape(x.shape) if x.requires_grad else None
        gw = g2.T @ xs.reshape(-1, weight.shape[1]) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, inputs, backward)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c = xp.shape[:2]
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # [B, C, Ho, Wo, kh, kw] -> [B, Ho*Wo, C*kh*kw]
    return windows.transpose(0, 2, 3, 1, 4, 5).reshape(b, ho * wo, c * kh * kw)


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x [B, C, H, W]`` with ``w [O, C, kh, kw]``."""
    if x.ndim != 4 or w.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, c, h, wd = x.shape
    o, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0 or kh > h + 2 * padding or kw > wd + 2 * padding:
        raise DimensionError(f"conv2d output would be empty: input {x.shape}, kernel {w.shape}, padding {padding}")

    if kh == 1 and kw == 1 and stride == 1 and padding == 0:
        cols = x.data.reshape(bsz, c, h * wd).transpose(0, 2, 1)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
        cols = _im2col(xp, kh, kw, stride, ho, wo)
    cols = np.ascontiguousarray(cols)
    wmat = w.data.reshape(o, -1)
    out = np.matmul(cols, wmat.T)
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(bsz, o, ho, wo)
    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        g2 = g.reshape(bsz, o, ho * wo).transpose(0, 2, 1)
        gx = gw = gb = None
        if w.requires_grad:
            gw = (g2.reshape(-1, o).T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 1))
        if x.requires_grad:
            dcols = np.matmul(g2, wmat)
            if kh == 1 and kw == 1 and stride == 1 and padding == 0:
                gx = dcols.transpose(0, 2, 1).reshape(x.shape)
            else:
                dcols = dcols.reshape(bsz, ho, wo, c, kh, kw)
                gxp = np.zeros((bsz, c, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                        )
                gx = gxp[:, :, padding : padding + h, padding : padding + wd] if padding else gxp
        if bias is None:
            return gx, gw
        return gx, gw, gb

    return _make(out, inputs, backward)


# -- normalization and attention primitives ---------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward)


def normalize(
    x: Tensor,
    kind: str = "layer",
    groups: int = 1,
    eps: float = 1e-5,
    weight: Tensor | None = None,
    bias: Tensor | None = None,
) -> Tensor:
    """Group or layer normalization with an optional per-channel affine.

    ``layer`` normalizes over the last axis; ``group`` splits axis 1 of a
    ``[B, C, ...]`` tensor into ``groups`` sets and normalizes each set.
    """
    if kind == "layer":
        axes = (-1,)
        xs = x.data
    elif kind == "group":
        channels = x.shape[1]
        if groups <= 0 or channels % groups:
            raise ConfigurationError(f"{channels} channels cannot be split into {groups} groups")
        xs = x.data.reshape(x.shape[0], groups, -1)
        axes = (-1,)
    else:
        raise ConfigurationError(f"unknown normalization kind {kind!r}")

    mu = xs.mean(axis=axes, keepdims=True)
    centered = xs - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat_s = centered * inv
    xhat = xhat_s.reshape(x.shape)

    if kind == "group":
        affine_shape = (1, x.shape[1]) + (1,) * (x.ndim - 2)
    else:
        affine_shape = (x.shape[-1],)
    out = xhat
    if weight is not None:
        out = out * weight.data.reshape(affine_shape)
    if bias is not None:
        out = out + bias.data.reshape(affine_shape)

    inputs = [x]
    if weight is not None:
        inputs.append(weight)
    if bias is not None:
        inputs.append(bias)
    n = xs.shape[-1]

    def backward(g):
        grads = []
        gh = g * weight.data.reshape(affine_shape) if weight is not None else g
        if x.requires_grad:
            ghs = gh.reshape(xs.shape)
            gx = inv / n * (n * ghs - ghs.sum(axis=axes, keepdims=True)
                            - xhat_s * (ghs * xhat_s).sum(axis=axes, keepdims=True))
            grads.append(gx.reshape(x.shape))
        else:
            grads.append(None)
        if kind == "group":
            reduce_axes = tuple(i for i in range(x.ndim) if i != 1)
        else:
            reduce_axes = tuple(range(x.ndim - 1))
        if weight is not None:
            grads.append((g * xhat).sum(axis=reduce_axes).reshape(weight.shape) if weight.requires_grad else None)
        if bias is not None:
            grads.append(g.sum(axis=reduce_axes).reshape(bias.shape) if bias.requires_grad else None)
        return tuple(grads)

    return _make(out.astype(x.dtype, copy=False), tuple(inputs), backward)


def group_norm(x, groups, weight=None, bias=None, eps=1e-5):
    return normalize(x, "group", groups, eps, weight, bias)


def layer_norm(x, weight=None, bias=None, eps=1e-5):
    return normalize(x, "layer", 1, eps, weight, bias)


def attention(q: Tensor, k: Tensor, v: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    """Scaled dot-product attention ``softmax(q k^T / sqrt(d)) v``.

    ``q`` is ``[..., n, d]``, ``k`` and ``v`` are ``[..., m, d]``.  ``key_mask``
    (broadcastable to ``[..., n, m]``, True = keep) removes keys before the
    softmax.
    """
    return matmul(attention_weights(q, k, key_mask), v)


def attention_weights(q: Tensor, k: Tensor, key_mask: np.ndarray | None = None) -> Tensor:
    d = q.shape[-1]
    scores = scale(matmul(q, transpose(k, _swap_last(k.ndim))), 1.0 / math.sqrt(d))
    if key_mask is not None:
        bias = np.where(key_mask, 0.0, -1e9).astype(q.dtype)
        scores = add(scores, Tensor(np.broadcast_to(bias, scores.shape), dtype=q.dtype))
    return softmax(scores, axis=-1)


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def mse(a: Tensor, b) -> Tensor:
    diff = sub(a, b)
    return mean(square(diff))


def zeros(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


def ones(shape, dtype=DEFAULT_DTYPE, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)
