"""Low-rank adapters on frozen linear projections.

An adapted projection computes ``W0 x + b + (alpha / r) * B (A x)``.  ``B``
starts at zero, so an adapter that has not been trained leaves every output
bit-identical to the base model.
"""

from __future__ import annotations

import fnmatch

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, content_hash
from .errors import CompatibilityError, ConfigurationError, ContractError
from .nn import Linear, Module, Parameter
from .tensor import Tensor

DEFAULT_TARGETS = ("*attn.to_q", "*attn.to_k", "*attn.to_v", "*attn.to_out")


class LoraFactor(Module):
    def __init__(self, target: str, in_features: int, out_features: int, rank: int, alpha: float,
                 rng=None, dtype=np.float32):
        if rank < 1 or rank >= min(in_features, out_features):
            raise ConfigurationError(
                f"{target}: rank {rank} must satisfy 1 <= r < min(d, k) = {min(in_features, out_features)}")
        self.target = target
        self.rank = rank
        self.alpha = float(alpha)
        a = np.zeros((rank, in_features), dtype) if rng is None else \
            (rng.standard_normal((rank, in_features)) * 0.01).astype(dtype)
        self.A = Parameter(a)
        self.B = Parameter(np.zeros((out_features, rank), dtype))

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def shape(self) -> tuple:
        return self.B.shape[0], self.A.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return T.scale(T.linear(T.linear(x, self.A), self.B), self.scale)

    def delta(self) -> np.ndarray:
        """Dense ``(alpha / r) * B A``."""
        return (self.scale * (self.B.data.astype(np.float64) @ self.A.data.astype(np.float64))).astype(self.B.dtype)


def adapted_forward(x, w0, factor: LoraFactor, bias=None) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    w0 = w0 if isinstance(w0, Tensor) else Tensor(w0)
    d, k = w0.shape
    if factor.shape != (d, k) or x.shape[-1] != k:
        raise ContractError(f"adapter {factor.shape} / input width {x.shape[-1]} do not fit weight {w0.shape}")
    return T.add(T.linear(x, w0, bias), factor(x))


def linear_modules(model: Module) -> dict:
    return {name: m for name, m in model.named_modules() if isinstance(m, Linear)}


class AdapterSet(Module):
    def __init__(self, factors: dict, metadata: dict | None = None):
        self.factors = dict(factors)
        self._metadata = dict(metadata or {})

    @property
    def metadata(self) -> dict:
        return self._metadata

    def __len__(self):
        return len(self.factors)

    def dense_count(self) -> int:
        return sum(int(np.prod(f.shape)) for f in self.factors.values())

    def to_checkpoint(self) -> Checkpoint:
        tensors = {}
        for name, f in self.factors.items():
            tensors[f"{name}.A"] = f.A.data
            tensors[f"{name}.B"] = f.B.data
        meta = {"type": "LORA", "targets": {n: {"rank": f.rank, "alpha": f.alpha} for n, f in self.factors.items()}}
        meta.update(self._metadata)
        return Checkpoint(tensors, meta)

    def save(self, path):
        return self.to_checkpoint().save(path)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "AdapterSet":
        if ckpt.kind != "LORA":
            raise CompatibilityError(f"expected a LORA checkpoint, found {ckpt.kind}")
        factors = {}
        for name, spec in ckpt.metadata["targets"].items():
            a, b = ckpt.tensors[f"{name}.A"], ckpt.tensors[f"{name}.B"]
            f = LoraFactor(name, a.shape[1], b.shape[0], int(spec["rank"]), spec["alpha"], dtype=a.dtype)
            f.A.data = a.copy()
            f.B.data = b.copy()
            factors[name] = f
        meta = {k: v for k, v in ckpt.metadata.items() if k not in ("type", "targets", "schema_version")}
        return cls(factors, meta)

    @classmethod
    def load(cls, path) -> "AdapterSet":
        return cls.from_checkpoint(Checkpoint.load(path, expect_type="LORA"))


def match_targets(model: Module, patterns) -> list[str]:
    patterns = [patterns] if isinstance(patterns, str) else list(patterns)
    names = linear_modules(model)
    return [n for n in names if any(fnmatch.fnmatchcase(n, p) for p in patterns)]


def attach(model: Module, patterns=DEFAULT_TARGETS, rank: int = 8, alpha: float = 8.0, rng=None,
           metadata: dict | None = None) -> AdapterSet:
    """Create one factor per matching linear layer and freeze ``model``.

    ``metadata`` should carry ``base_hash`` (see :func:`model_hash`) so the
    adapters can later refuse to load onto a different base.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    linears = linear_modules(model)
    matched = match_targets(model, patterns)
    if not matched:
        raise ConfigurationError(f"patterns {patterns!r} matched no projection; available: {', '.join(linears)}")
    factors = {}
    for name in matched:
        layer = linears[name]
        if layer._adapter is not None:
            raise ConfigurationError(f"{name} already carries an adapter")
        factors[name] = LoraFactor(name, layer.in_features, layer.out_features, rank, alpha, rng,
                                   dtype=layer.weight.dtype)
    model.freeze()
    for name, f in factors.items():
        linears[name]._adapter = f
    return AdapterSet(factors, metadata)


def apply(adapters: AdapterSet, model: Module, base_hash: str | None = None) -> None:
    """Attach already-trained factors to a (base) model at runtime."""
    _check_base(adapters, model, base_hash)
    linears = linear_modules(model)
    for name, f in adapters.factors.items():
        layer = linears.get(name)
        if layer is None or (layer.out_features, layer.in_features) != f.shape:
            raise CompatibilityError(f"adapter target {name} missing or shaped differently in this model")
        if layer._adapter is not None:
            raise ConfigurationError(f"{name} already carries an adapter")
    model.freeze()
    for name, f in adapters.factors.items():
        linears[name]._adapter = f


def detach(model: Module) -> None:
    for layer in linear_modules(model).values():
        layer._adapter = None


def model_hash(model: Module) -> str:
    return content_hash(model.state_dict())


def _check_base(adapters: AdapterSet, model: Module, base_hash: str | None):
    stored = adapters.metadata.get("base_hash")
    if stored is None:
        return
    actual = base_hash if base_hash is not None else model_hash(model)
    if actual != stored:
        raise CompatibilityError(f"adapter was trained on base {stored[:12]}, this base is {actual[:12]}")


def merge(adapters: AdapterSet, state: dict, prefix: str = "") -> dict:
    """Weights with every ``(alpha / r) B A`` folded into its ``W0``; ``state`` is not modified."""
    stored = adapters.metadata.get("base_hash")
    if stored is not None and content_hash(state) != stored:
        raise CompatibilityError("adapter base hash does not match these weights")
    merged = dict(state)
    for name, f in adapters.factors.items():
        key = f"{prefix}{name}.weight"
        if key not in merged or merged[key].shape != f.shape:
            raise CompatibilityError(f"adapter target {key} missing or shaped differently")
        merged[key] = merged[key] + f.delta()
    return merged


def merge_into(adapters: AdapterSet, model: Module) -> None:
    """Fold the adapters into ``model`` in place and remove the runtime hooks."""
    merged = merge(adapters, model.state_dict())
    detach(model)
    model.load_state_dict(merged)
