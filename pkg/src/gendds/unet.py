"""Noise-prediction U-Net conditioned on tag embeddings through cross-attention.

The timestep enters residual blocks as a scale/shift of the second norm; the
prompt reaches the network only through the cross-attention layers of the
spatial transformer blocks.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .nn import Attention, Conv2d, FeedForward, GroupNorm, LayerNorm, Linear, Module
from .tensor import Tensor
from .text import ConditioningMatrix


@dataclass
class UNetConfig:
    latent_channels: int = 4
    base_channels: int = 32
    channel_mult: tuple = (1, 2)
    attention_levels: tuple = (1,)
    num_res_blocks: int = 1
    context_dim: int = 64
    heads: int = 4
    width_multiplier: int = 1
    norm_groups: int = 8

    def __post_init__(self):
        self.channel_mult = tuple(self.channel_mult)
        self.attention_levels = tuple(self.attention_levels)
        self.validate()

    @classmethod
    def tiny(cls, **overrides) -> "UNetConfig":
        params = dict(base_channels=8, channel_mult=(1, 2), attention_levels=(1,), context_dim=8,
                      heads=2, norm_groups=4)
        params.update(overrides)
        return cls(**params)

    @classmethod
    def from_dict(cls, data: dict) -> "UNetConfig":
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_mult"] = list(self.channel_mult)
        d["attention_levels"] = list(self.attention_levels)
        return d

    @property
    def levels(self) -> int:
        return len(self.channel_mult)

    def channels(self, level: int) -> int:
        return self.base_channels * self.width_multiplier * self.channel_mult[level]

    @property
    def time_dim(self) -> int:
        return 4 * self.channels(0)

    def validate(self) -> None:
        if not self.channel_mult or self.num_res_blocks < 1:
            raise ConfigurationError("need at least one level and one residual block per level")
        if not set(self.attention_levels) <= set(range(self.levels)):
            raise ConfigurationError(f"attention levels {self.attention_levels} outside {self.levels} levels")
        for level in range(self.levels):
            ch = self.channels(level)
            if ch % self.norm_groups:
                raise ConfigurationError(f"level {level}: {ch} channels not divisible by {self.norm_groups} groups")
            if level in self.attention_levels and ch % self.heads:
                raise ConfigurationError(f"level {level}: {ch} channels not divisible by {self.heads} heads")
        if self.channels(0) % 2:
            raise ConfigurationError("timestep embedding width must be even")

    def temporal_sites(self) -> list[str]:
        """Residual-block positions at attention-bearing levels, encoder to decoder."""
        sites = []
        for level in self.attention_levels:
            sites += [f"down.{level}.res.{j}" for j in range(self.num_res_blocks)]
        sites += ["mid.res0", "mid.res1"]
        for level in sorted(self.attention_levels, reverse=True):
            sites += [f"up.{level}.res.{j}" for j in range(self.num_res_blocks)]
        return sites

    def site_channels(self, site: str) -> int:
        parts = site.split(".")
        if parts[0] == "mid":
            return self.channels(self.levels - 1)
        return self.channels(int(parts[1]))

    def all_sites(self) -> list[str]:
        sites = [f"down.{l}.res.{j}" for l in range(self.levels) for j in range(self.num_res_blocks)]
        sites += ["mid.res0", "mid.res1"]
        sites += [f"up.{l}.res.{j}" for l in reversed(range(self.levels)) for j in range(self.num_res_blocks)]
        return sites

    def param_count(self) -> int:
        """Parameter count from layer arithmetic alone."""
        def conv(i, o, k):
            return o * i * k * k + o

        def lin(i, o, bias=True):
            return o * i + (o if bias else 0)

        def res(i, o):
            n = 2 * i + conv(i, o, 3) + lin(self.time_dim, 2 * o) + 2 * o + conv(o, o, 3)
            return n + (conv(i, o, 1) if i != o else 0)

        def attn(c, ctx):
            return lin(c, c, False) + 2 * lin(ctx, c, False) + lin(c, c)

        def transformer(c):
            return (2 * c + lin(c, c) + 3 * 2 * c + attn(c, c) + attn(c, self.context_dim)
                    + lin(c, 4 * c) + lin(4 * c, c) + lin(c, c))

        ch0, last = self.channels(0), self.levels - 1
        total = lin(ch0, self.time_dim) + lin(self.time_dim, self.time_dim) + conv(self.latent_channels, ch0, 3)
        prev = ch0
        for level in range(self.levels):
            ch = self.channels(level)
            for j in range(self.num_res_blocks):
                total += res(prev if j == 0 else ch, ch)
                if level in self.attention_levels:
                    total += transformer(ch)
            prev = ch
            if level < last:
                total += conv(ch, ch, 3)
        cl = self.channels(last)
        total += 2 * res(cl, cl) + transformer(cl)
        prev = cl
        for level in reversed(range(self.levels)):
            ch = self.channels(level)
            for j in range(self.num_res_blocks):
                total += res(prev + ch if j == 0 else ch, ch)
                if level in self.attention_levels:
                    total += transformer(ch)
            prev = ch
            if level > 0:
                total += conv(ch, ch, 3)
        return total + 2 * ch0 + conv(ch0, self.latent_channels, 3)


def timestep_features(t, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of (possibly fractional) timesteps, ``[B, dim]``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1).astype(dtype)


class TimestepEmbedding(Module):
    def __init__(self, dim, out_dim, rng, dtype=np.float32):
        self.dim = dim
        self.fc1 = Linear(dim, out_dim, rng, dtype=dtype)
        self.fc2 = Linear(out_dim, out_dim, rng, dtype=dtype)

    def forward(self, t):
        feats = Tensor(timestep_features(t, self.dim, self.fc1.weight.dtype))
        return self.fc2(T.silu(self.fc1(feats)))


class ResBlock(Module):
    def __init__(self, in_ch, out_ch, time_dim, groups, rng, dtype=np.float32):
        self.out_ch = out_ch
        self.norm1 = GroupNorm(groups, in_ch, dtype)
        self.conv1 = Conv2d(in_ch, out_ch, 3, rng, dtype=dtype)
        self.emb = Linear(time_dim, 2 * out_ch, rng, dtype=dtype)
        self.norm2 = GroupNorm(groups, out_ch, dtype)
        self.conv2 = Conv2d(out_ch, out_ch, 3, rng, dtype=dtype)
        self.skip = Conv2d(in_ch, out_ch, 1, rng, dtype=dtype) if in_ch != out_ch else None

    def forward(self, x, temb_act):
        h = self.conv1(T.silu(self.norm1(x)))
        ss = T.reshape(self.emb(temb_act), (x.shape[0], 2 * self.out_ch, 1, 1))
        scale_, shift = ss[:, : self.out_ch], ss[:, self.out_ch:]
        h = T.add(T.mul(self.norm2(h), T.add(scale_, 1.0)), shift)
        h = self.conv2(T.silu(h))
        skip = x if self.skip is None else self.skip(x)
        return T.add(skip, h)


def cross_attention(z_feat: Tensor, cond: ConditioningMatrix, attn: Attention, residual: Tensor | None = None) -> Tensor:
    """Queries from image tokens, keys/values from the conditioning rows.

    The attention output is added to ``residual`` (``z_feat`` by default).
    """
    if cond.matrix.shape[0] != z_feat.shape[0]:
        raise ContractError(f"conditioning batch {cond.matrix.shape[0]} != feature batch {z_feat.shape[0]}")
    base = z_feat if residual is None else residual
    return T.add(base, attn(z_feat, cond.matrix, cond.mask))


class SpatialTransformer(Module):
    """Self-attention, cross-attention and feed-forward over spatial tokens."""

    def __init__(self, ch, heads, context_dim, groups, rng, dtype=np.float32):
        self.norm = GroupNorm(groups, ch, dtype)
        self.proj_in = Linear(ch, ch, rng, dtype=dtype)
        self.norm1 = LayerNorm(ch, dtype)
        self.self_attn = Attention(ch, rng, heads=heads, dtype=dtype)
        self.norm2 = LayerNorm(ch, dtype)
        self.cross_attn = Attention(ch, rng, context_dim=context_dim, heads=heads, dtype=dtype)
        self.norm3 = LayerNorm(ch, dtype)
        self.ff = FeedForward(ch, rng, dtype=dtype)
        self.proj_out = Linear(ch, ch, rng, dtype=dtype)

    def forward(self, x, cond: ConditioningMatrix):
        b, c, h, w = x.shape
        tokens = T.transpose(T.reshape(self.norm(x), (b, c, h * w)), (0, 2, 1))
        tokens = self.proj_in(tokens)
        tokens = T.add(tokens, self.self_attn(self.norm1(tokens)))
        tokens = cross_attention(self.norm2(tokens), cond, self.cross_attn, residual=tokens)
        tokens = T.add(tokens, self.ff(self.norm3(tokens)))
        tokens = self.proj_out(tokens)
        out = T.reshape(T.transpose(tokens, (0, 2, 1)), (b, c, h, w))
        return T.add(x, out)


class Downsample(Module):
    def __init__(self, ch, rng, dtype=np.float32):
        self.conv = Conv2d(ch, ch, 3, rng, stride=2, padding=1, dtype=dtype)

    def forward(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, ch, rng, dtype=np.float32):
        self.conv = Conv2d(ch, ch, 3, rng, dtype=dtype)

    def forward(self, x):
        return self.conv(T.upsample_nearest(x, 2))


class Level(Module):
    def __init__(self, res, attn, resample):
        self.res = res
        self.attn = attn
        self.resample = resample


class MidBlock(Module):
    def __init__(self, ch, config: UNetConfig, rng, dtype):
        self.res0 = ResBlock(ch, ch, config.time_dim, config.norm_groups, rng, dtype)
        self.attn = SpatialTransformer(ch, config.heads, config.context_dim, config.norm_groups, rng, dtype)
        self.res1 = ResBlock(ch, ch, config.time_dim, config.norm_groups, rng, dtype)


class TemporalHooks:
    """Per-site callables applied after a spatial block when running on video."""

    def __init__(self, blocks: dict, frames: int):
        self.blocks = blocks
        self.frames = frames

    def __call__(self, site, h):
        block = self.blocks.get(site)
        return h if block is None else block(h, self.frames)


def _identity_hook(site, h):
    return h


class EncoderMixin:
    """Shared encoder path: timestep MLP, input conv, down levels, middle block."""

    def encode(self, z_t, t, cond: ConditioningMatrix, hint: Tensor | None = None, hook=_identity_hook):
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (z_t.shape[0],))
        temb_act = T.silu(self.time_embed(t))
        h = self.conv_in(z_t)
        if hint is not None:
            h = T.add(h, hint)
        features = []
        for l, level in enumerate(self.down):
            for j, res in enumerate(level.res):
                h = res(h, temb_act)
                if level.attn:
                    h = level.attn[j](h, cond)
                h = hook(f"down.{l}.res.{j}", h)
            features.append(h)
            if level.resample is not None:
                h = level.resample(h)
        h = self.mid.res0(h, temb_act)
        h = self.mid.attn(h, cond)
        h = hook("mid.res0", h)
        h = self.mid.res1(h, temb_act)
        h = hook("mid.res1", h)
        features.append(h)
        return features, temb_act


class UNet(EncoderMixin, Module):
    def __init__(self, config: UNetConfig, rng, dtype=np.float32):
        self.config = config
        c = config
        ch0 = c.channels(0)
        self.time_embed = TimestepEmbedding(ch0, c.time_dim, rng, dtype)
        self.conv_in = Conv2d(c.latent_channels, ch0, 3, rng, dtype=dtype)
        self.down = []
        prev = ch0
        for level in range(c.levels):
            ch = c.channels(level)
            res = [ResBlock(prev if j == 0 else ch, ch, c.time_dim, c.norm_groups, rng, dtype)
                   for j in range(c.num_res_blocks)]
            attn = ([SpatialTransformer(ch, c.heads, c.context_dim, c.norm_groups, rng, dtype)
                     for _ in range(c.num_res_blocks)] if level in c.attention_levels else [])
            down = Downsample(ch, rng, dtype) if level < c.levels - 1 else None
            self.down.append(Level(res, attn, down))
            prev = ch
        self.mid = MidBlock(prev, c, rng, dtype)
        up = {}
        for level in reversed(range(c.levels)):
            ch = c.channels(level)
            res = [ResBlock(prev + ch if j == 0 else ch, ch, c.time_dim, c.norm_groups, rng, dtype)
                   for j in range(c.num_res_blocks)]
            attn = ([SpatialTransformer(ch, c.heads, c.context_dim, c.norm_groups, rng, dtype)
                     for _ in range(c.num_res_blocks)] if level in c.attention_levels else [])
            upsample = Upsample(ch, rng, dtype) if level > 0 else None
            up[level] = Level(res, attn, upsample)
            prev = ch
        self.up = [up[level] for level in range(c.levels)]
        self.out_norm = GroupNorm(c.norm_groups, ch0, dtype)
        self.out_conv = Conv2d(ch0, c.latent_channels, 3, rng, dtype=dtype)

    def _check_input(self, z_t):
        c = self.config
        shape = z_t.shape
        factor = 2 ** (c.levels - 1)
        if len(shape) != 4 or shape[1] != c.latent_channels or shape[2] % factor or shape[3] % factor:
            raise ContractError(f"latent shape {shape} incompatible with config "
                                f"({c.latent_channels} channels, spatial divisible by {factor})")

    def collect_encoder_features(self, z_t, t, cond: ConditioningMatrix, hook=_identity_hook) -> list:
        """Skip-connection features per level followed by the middle-block output."""
        self._check_input(z_t)
        features, _ = self.encode(z_t, t, cond, hook=hook)
        return features

    def forward(self, z_t, t, cond: ConditioningMatrix, control: list | None = None, hook=_identity_hook):
        """Predict the noise in ``z_t``.

        ``control`` optionally holds one residual per skip site plus one for the
        middle block; each is added to the matching feature.
        """
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        self._check_input(z_t)
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0):
            raise ContractError("timestep must be non-negative")
        features, temb_act = self.encode(z_t, t, cond, hook=hook)
        if control is not None:
            if len(control) != len(features):
                raise ContractError(f"expected {len(features)} control residuals, got {len(control)}")
            features = [T.add(f, c) for f, c in zip(features, control)]
        skips, h = features[:-1], features[-1]
        for l in reversed(range(self.config.levels)):
            level = self.up[l]
            h = T.concat([h, skips[l]], axis=1)
            for j, res in enumerate(level.res):
                h = res(h, temb_act)
                if level.attn:
                    h = level.attn[j](h, cond)
                h = hook(f"up.{l}.res.{j}", h)
            if level.resample is not None:
                h = level.resample(h)
        return self.out_conv(T.silu(self.out_norm(h)))

    def cross_attention_modules(self) -> list[tuple[str, Attention]]:
        return [(name, m) for name, m in self.named_modules() if name.endswith("cross_attn")]
