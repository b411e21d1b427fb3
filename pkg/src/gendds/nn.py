"""Layer building blocks with hierarchical parameter names.

Parameter names follow attribute paths (``down.1.attn.cross_attn.to_q.weight``)
so checkpoints, adapters and copied branches can address weights by name.
Attributes whose name starts with an underscore are not traversed.
"""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .tensor import Tensor


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, data, requires_grad: bool = True, dtype=None):
        super().__init__(data, requires_grad=requires_grad, dtype=dtype)


class Module:
    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{i}", item
            elif isinstance(value, dict):
                for key, item in value.items():
                    if isinstance(item, (Parameter, Module)):
                        yield f"{name}.{key}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in self._children():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            else:
                yield from value.named_parameters(full + ".")

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for name, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def freeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for p in self.parameters():
            p.requires_grad = True
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict:
            missing = sorted(set(own) - set(state))
            unexpected = sorted(set(state) - set(own))
            if missing or unexpected:
                raise ContractError(f"state mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ContractError(f"{name}: stored shape {value.shape} != parameter shape {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` stored ``[out, in]``.

    An attached low-rank adapter (see :mod:`gendds.lora`) is added to the
    frozen product at call time.
    """

    def __init__(self, in_features, out_features, rng, bias=True, dtype=np.float32, zero=False):
        self.in_features = in_features
        self.out_features = out_features
        shape = (out_features, in_features)
        w = np.zeros(shape, dtype) if zero else _uniform(rng, shape, in_features, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_features, dtype)) if bias else None
        self._adapter = None

    def forward(self, x: Tensor) -> Tensor:
        y = T.linear(x, self.weight, self.bias)
        if self._adapter is not None:
            y = T.add(y, self._adapter(x))
        return y


class Conv2d(Module):
    def __init__(self, in_ch, out_ch, kernel, rng, stride=1, padding=None, bias=True, dtype=np.float32, zero=False):
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        shape = (out_ch, in_ch, kernel, kernel)
        w = np.zeros(shape, dtype) if zero else _uniform(rng, shape, in_ch * kernel * kernel, dtype)
        self.weight = Parameter(w)
        self.bias = Parameter(np.zeros(out_ch, dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, groups, channels, dtype=np.float32, eps=1e-5):
        if channels % groups:
            raise ConfigurationError(f"{channels} channels not divisible into {groups} groups")
        self.groups = groups
        self.eps = eps
        self.weight = Parameter(np.ones(channels, dtype))
        self.bias = Parameter(np.zeros(channels, dtype))

    def forward(self, x):
        return T.normalize(x, "group", self.groups, self.eps, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim, dtype=np.float32, eps=1e-5):
        self.eps = eps
        self.weight = Parameter(np.ones(dim, dtype))
        self.bias = Parameter(np.zeros(dim, dtype))

    def forward(self, x):
        return T.normalize(x, "layer", 1, self.eps, self.weight, self.bias)


class Embedding(Module):
    def __init__(self, count, dim, rng, dtype=np.float32):
        self.weight = Parameter(rng.normal(0.0, 0.02, size=(count, dim)).astype(dtype))

    def forward(self, ids):
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= self.weight.shape[0]):
            raise ContractError(f"token id outside [0, {self.weight.shape[0]})")
        return T.embedding(ids, self.weight)


class Attention(Module):
    """Multi-head attention; keys and values come from ``context`` when given.

    ``to_q``/``to_k``/``to_v`` are bias-free projections, ``to_out`` maps the
    concatenated heads back to the query width.
    """

    def __init__(self, query_dim, rng, context_dim=None, heads=4, dim_head=None, dtype=np.float32):
        if query_dim % heads:
            raise ConfigurationError(f"width {query_dim} not divisible by {heads} heads")
        context_dim = context_dim or query_dim
        dim_head = dim_head or query_dim // heads
        inner = heads * dim_head
        self.heads = heads
        self.to_q = Linear(query_dim, inner, rng, bias=False, dtype=dtype)
        self.to_k = Linear(context_dim, inner, rng, bias=False, dtype=dtype)
        self.to_v = Linear(context_dim, inner, rng, bias=False, dtype=dtype)
        self.to_out = Linear(inner, query_dim, rng, dtype=dtype)

    def _split(self, x: Tensor) -> Tensor:
        b, n, inner = x.shape
        return T.transpose(T.reshape(x, (b, n, self.heads, inner // self.heads)), (0, 2, 1, 3))

    def weights(self, x: Tensor, context: Tensor | None = None, key_mask=None) -> Tensor:
        """Attention probabilities ``[B, heads, N, M]``."""
        context = x if context is None else context
        q, k = self._split(self.to_q(x)), self._split(self.to_k(context))
        return T.attention_weights(q, k, _head_mask(key_mask))

    def forward(self, x: Tensor, context: Tensor | None = None, key_mask=None) -> Tensor:
        context = x if context is None else context
        q = self._split(self.to_q(x))
        k = self._split(self.to_k(context))
        v = self._split(self.to_v(context))
        out = T.attention(q, k, v, _head_mask(key_mask))
        b, h, n, d = out.shape
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, n, h * d))
        return self.to_out(out)


def _head_mask(key_mask):
    if key_mask is None:
        return None
    key_mask = np.asarray(key_mask, dtype=bool)
    return key_mask[:, None, None, :]


class FeedForward(Module):
    def __init__(self, dim, rng, mult=4, dtype=np.float32):
        self.fc1 = Linear(dim, dim * mult, rng, dtype=dtype)
        self.fc2 = Linear(dim * mult, dim, rng, dtype=dtype)

    def forward(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


def set_requires_grad(params, flag: bool) -> None:
    for p in params:
        p.requires_grad = flag
