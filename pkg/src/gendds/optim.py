"""AdamW with decoupled weight decay, and the warmup learning-rate policy."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


@dataclass
class OptimizerState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0


def adamw_step(params, grads, state: OptimizerState, lr: float, names=None) -> None:
    """One in-place AdamW update of ``params`` (arrays or Tensors).

    Missing gradients (``None``) count as zero.
    """
    datas = [p if isinstance(p, np.ndarray) else p.data for p in params]
    if not state.m:
        state.m = [np.zeros_like(d) for d in datas]
        state.v = [np.zeros_like(d) for d in datas]
    for i, g in enumerate(grads):
        if g is not None and not np.all(np.isfinite(g)):
            label = names[i] if names else f"#{i}"
            raise NumericError(f"non-finite gradient in parameter {label}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for d, g, m, v in zip(datas, grads, state.m, state.v):
        if state.weight_decay:
            d *= d.dtype.type(1.0 - lr * state.weight_decay)
        if g is None:
            g = np.zeros_like(d)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        d -= (lr * update).astype(d.dtype, copy=False)


class AdamW:
    """Parameter groups sharing one step counter, each with its own learning rate."""

    def __init__(self, groups: dict, weight_decay: float = 0.0, betas=(0.9, 0.999), eps=1e-8):
        # groups: name -> list of (param_name, Parameter)
        self.groups = {k: list(v) for k, v in groups.items() if v}
        self.states = {k: OptimizerState(beta1=betas[0], beta2=betas[1], eps=eps, weight_decay=weight_decay)
                       for k in self.groups}

    def step(self, lrs: dict) -> None:
        for key, items in self.groups.items():
            names = [n for n, _ in items]
            params = [p for _, p in items]
            adamw_step(params, [p.grad for p in params], self.states[key], lrs[key], names)

    def zero_grad(self) -> None:
        for items in self.groups.values():
            for _, p in items:
                p.grad = None

    @property
    def step_count(self) -> int:
        return max((s.step for s in self.states.values()), default=0)


def warmup_constant(base_lr: float, step: int, total_steps: int, warmup_frac: float = 0.05) -> float:
    """Linear ramp over the first ``warmup_frac`` of training, then constant."""
    warmup = max(1, math.ceil(warmup_frac * total_steps))
    return base_lr * min(1.0, (step + 1) / warmup)
