"""Temporal transformer blocks that turn the image denoiser into a video denoiser.

Spatial layers see the ``F`` frames of each clip as ordinary batch entries.
After selected residual blocks, a temporal block regroups the activations
into one length-``F`` sequence per spatial position and runs
norm / self-attention / feed-forward along the frame axis.  Its whole
contribution is multiplied by a gate ``gamma`` that starts at zero.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import CompatibilityError, ConfigurationError, ContractError
from .nn import Attention, FeedForward, LayerNorm, Module, Parameter
from .tensor import Tensor
from .unet import TemporalHooks, UNet

MAX_FRAMES = 16


class TemporalBlock(Module):
    def __init__(self, channels: int, rng, heads: int = 4, max_frames: int = MAX_FRAMES, dtype=np.float32):
        self.channels = channels
        self.pos = Parameter((rng.standard_normal((max_frames, channels)) * 0.02).astype(dtype))
        self.norm1 = LayerNorm(channels, dtype)
        self.attn = Attention(channels, rng, heads=heads, dtype=dtype)
        self.norm2 = LayerNorm(channels, dtype)
        self.ff = FeedForward(channels, rng, mult=2, dtype=dtype)
        self.gamma = Parameter(np.zeros(1, dtype))

    def _sequences(self, h: Tensor, frames: int) -> Tensor:
        n, c, hh, ww = h.shape
        if n % frames:
            raise ContractError(f"batch of {n} frames is not a multiple of F={frames}")
        x = T.reshape(h, (n // frames, frames, c, hh * ww))
        x = T.transpose(x, (0, 3, 1, 2))
        return T.reshape(x, (n // frames * hh * ww, frames, c))

    def _unsequence(self, x: Tensor, shape) -> Tensor:
        n, c, hh, ww = shape
        frames = x.shape[1]
        x = T.reshape(x, (n // frames, hh * ww, frames, c))
        return T.reshape(T.transpose(x, (0, 2, 3, 1)), shape)

    def attention_weights(self, h: Tensor, frames: int) -> Tensor:
        x = T.add(self._sequences(h, frames), self.pos[:frames])
        return self.attn.weights(self.norm1(x))

    def forward(self, h: Tensor, frames: int) -> Tensor:
        if not 1 <= frames <= self.pos.shape[0]:
            raise ContractError(f"F={frames} outside 1..{self.pos.shape[0]}")
        x = self._sequences(h, frames)
        z = T.add(x, self.pos[:frames])
        z = T.add(z, self.attn(self.norm1(z)))
        z = T.add(z, self.ff(self.norm2(z)))
        delta = self._unsequence(T.sub(z, x), h.shape)
        return T.add(h, T.mul(delta, self.gamma))


class VideoModel(Module):
    """Frozen spatial U-Net plus temporal blocks keyed by insertion site."""

    def __init__(self, unet: UNet, blocks: dict, frames: int = 8):
        if not 1 <= frames <= MAX_FRAMES:
            raise ConfigurationError(f"frame count {frames} outside 1..{MAX_FRAMES}")
        self._unet = unet
        self.blocks = dict(blocks)
        self.frames = frames

    @property
    def unet(self) -> UNet:
        return self._unet

    @property
    def sites(self) -> list[str]:
        return list(self.blocks)

    def hooks(self, frames: int | None = None) -> TemporalHooks:
        return TemporalHooks(self.blocks, frames or self.frames)

    def forward(self, z, t, cond, control=None):
        """Noise prediction for clips.

        ``z`` is ``[B, F, c, h, w]`` (or ``[F, c, h, w]`` for one clip); ``t``
        holds one timestep per clip and ``cond`` one row per clip.
        """
        z = z if isinstance(z, Tensor) else Tensor(z)
        single = z.ndim == 4
        if single:
            z = T.reshape(z, (1,) + z.shape)
        b, f = z.shape[:2]
        if f != self.frames:
            raise ContractError(f"clip has {f} frames, model expects F={self.frames}")
        flat = T.reshape(z, (b * f,) + z.shape[2:])
        t_rows = np.repeat(np.broadcast_to(np.asarray(t, dtype=np.float64), (b,)), f)
        cond_rows = cond.repeat(f) if cond.batch == b else cond
        out = self._unet(flat, t_rows, cond_rows, control=control, hook=self.hooks(f))
        out = T.reshape(out, (b, f) + out.shape[1:])
        return out[0] if single else out

    def to_checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {"type": "TEMPORAL", "frames": self.frames, "sites": self.sites,
                "heads": next(iter(self.blocks.values())).attn.heads if self.blocks else 1}
        meta.update(metadata or {})
        return Checkpoint(self.state_dict(), meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint, unet: UNet, frames: int | None = None) -> "VideoModel":
        if ckpt.kind != "TEMPORAL":
            raise CompatibilityError(f"expected a TEMPORAL checkpoint, found {ckpt.kind}")
        model = attach_temporal(unet, ckpt.metadata["sites"], frames or ckpt.metadata["frames"],
                                heads=ckpt.metadata.get("heads", 4))
        model.load_state_dict(ckpt.tensors)
        return model


def attach_temporal(unet: UNet, sites=None, frames: int = 8, rng=None, heads: int = 4) -> VideoModel:
    rng = np.random.default_rng(0) if rng is None else rng
    valid = unet.config.all_sites()
    if sites is None:
        sites = unet.config.temporal_sites()
    elif isinstance(sites, str):
        if sites != "all":
            raise ConfigurationError(f"temporal sites must be a list or 'all', got {sites!r}")
        sites = valid
    else:
        sites = list(sites)
    for s in sites:
        if s not in valid:
            raise ConfigurationError(f"unknown temporal site {s!r}; valid sites: {', '.join(valid)}")
    if len(set(sites)) != len(sites):
        raise ConfigurationError("duplicate temporal site")
    unet.freeze()
    dtype = unet.conv_in.weight.dtype
    blocks = {}
    for s in sites:
        ch = unet.config.site_channels(s)
        h = heads if ch % heads == 0 else 1
        blocks[s] = TemporalBlock(ch, rng, heads=h, dtype=dtype)
    return VideoModel(unet, blocks, frames)
