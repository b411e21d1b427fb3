"""Depth-conditioned control branch over a frozen U-Net.

The branch is a trainable copy of the base encoder and middle block.  A small
hint network turns the depth map into features added after the copied input
convolution, and every branch feature passes through a zero-initialised 1x1
convolution before it is added to the matching base skip feature.  The
projections always run; at initialisation they contribute exact zeros.
"""

from __future__ import annotations

import copy
import math

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import CompatibilityError, ConfigurationError, ContractError
from .nn import Conv2d, Module
from .tensor import Tensor
from .unet import EncoderMixin, UNet, UNetConfig


class HintNetwork(Module):
    """Depth ``[B, 1, H, W]`` to ``[B, ch0, H/downsample, W/downsample]``."""

    def __init__(self, out_ch: int, downsample: int, rng, hidden: int = 16, dtype=np.float32):
        steps = int(round(math.log2(downsample))) if downsample > 1 else 0
        if 2 ** steps != downsample:
            raise ConfigurationError(f"hint downsample {downsample} is not a power of two")
        self.inp = Conv2d(1, hidden, 3, rng, dtype=dtype)
        self.down = [Conv2d(hidden, hidden, 3, rng, stride=2, padding=1, dtype=dtype) for _ in range(steps)]
        self.out = Conv2d(hidden, out_ch, 3, rng, dtype=dtype, zero=True)

    def forward(self, depth: Tensor) -> Tensor:
        h = T.silu(self.inp(depth))
        for conv in self.down:
            h = T.silu(conv(h))
        return self.out(h)


def feature_channels(config: UNetConfig) -> list[int]:
    return [config.channels(l) for l in range(config.levels)] + [config.channels(config.levels - 1)]


class ControlBranch(EncoderMixin, Module):
    def __init__(self, base: UNet, downsample: int = 4, rng=None):
        rng = np.random.default_rng(0) if rng is None else rng
        dtype = base.conv_in.weight.dtype
        self.config = base.config
        self.downsample = downsample
        self.time_embed = copy.deepcopy(base.time_embed)
        self.conv_in = copy.deepcopy(base.conv_in)
        self.down = copy.deepcopy(base.down)
        self.mid = copy.deepcopy(base.mid)
        for name in ("time_embed", "conv_in", "mid"):
            getattr(self, name).unfreeze()
        for level in self.down:
            level.unfreeze()
        self.hint = HintNetwork(base.config.channels(0), downsample, rng, dtype=dtype)
        self.zero_convs = [Conv2d(c, c, 1, rng, dtype=dtype, zero=True) for c in feature_channels(base.config)]

    def check_depth(self, depth, z_t) -> np.ndarray:
        depth = np.asarray(getattr(depth, "data", depth))
        b, _, h, w = z_t.shape
        want = (b, 1, h * self.downsample, w * self.downsample)
        if depth.shape != want:
            raise ContractError(f"depth map shape {depth.shape} does not match expected {want}")
        if not np.all(np.isfinite(depth)) or depth.min() < 0.0 or depth.max() > 1.0:
            raise ContractError("depth values must be finite and lie in [0, 1]")
        return depth

    def forward(self, z_t, t, cond, depth) -> list:
        """Residuals for each skip site and the middle block."""
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        depth = self.check_depth(depth, z_t)
        hint = self.hint(Tensor(depth.astype(self.conv_in.weight.dtype)))
        features, _ = self.encode(z_t, t, cond, hint=hint)
        return [zc(f) for zc, f in zip(self.zero_convs, features)]

    def to_checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {"type": "CONTROL", "downsample": self.downsample, "unet": self.config.to_dict()}
        meta.update(metadata or {})
        return Checkpoint(self.state_dict(), meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, base: UNet, base_hash: str | None = None) -> "ControlBranch":
        if ckpt.kind != "CONTROL":
            raise CompatibilityError(f"expected a CONTROL checkpoint, found {ckpt.kind}")
        stored = ckpt.metadata.get("base_hash")
        if stored is not None and base_hash is not None and stored != base_hash:
            raise CompatibilityError("control branch was trained against a different base model")
        branch = cls(base, ckpt.metadata["downsample"])
        branch.load_state_dict(ckpt.tensors)
        return branch


def build_control(base: UNet, downsample: int = 4, rng=None) -> ControlBranch:
    base.freeze()
    return ControlBranch(base, downsample, rng)


def controlled_forward(base: UNet, branch: ControlBranch, z_t, t, cond, depth, hook=None):
    residuals = branch(z_t, t, cond, depth)
    if hook is None:
        return base(z_t, t, cond, control=residuals)
    return base(z_t, t, cond, control=residuals, hook=hook)
