"""Deterministic convolutional autoencoder that defines the latent space.

Images ``[3, H, W]`` in ``[-1, 1]`` map to latents ``[c_z, H/4, W/4]``.
Latents are multiplied by ``scale_factor`` (one over their training-set
standard deviation) on the way in and divided by it on the way out.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint
from .errors import CompatibilityError, ContractError, DataError, DimensionError
from .nn import Conv2d, Module
from .optim import AdamW
from .tensor import Tensor

logger = logging.getLogger(__name__)

DOWNSAMPLE = 4


class Encoder(Module):
    def __init__(self, latent_channels, hidden, rng, dtype):
        c1, c2 = hidden
        self.conv0 = Conv2d(3, c1, 3, rng, dtype=dtype)
        self.down1 = Conv2d(c1, c2, 3, rng, stride=2, padding=1, dtype=dtype)
        self.down2 = Conv2d(c2, c2, 3, rng, stride=2, padding=1, dtype=dtype)
        self.out = Conv2d(c2, latent_channels, 1, rng, dtype=dtype)

    def forward(self, x):
        h = T.silu(self.conv0(x))
        h = T.silu(self.down1(h))
        h = T.silu(self.down2(h))
        return self.out(h)


class Decoder(Module):
    def __init__(self, latent_channels, hidden, rng, dtype):
        c1, c2 = hidden
        self.conv0 = Conv2d(latent_channels, c2, 3, rng, dtype=dtype)
        self.up1 = Conv2d(c2, c1, 3, rng, dtype=dtype)
        self.up2 = Conv2d(c1, c1, 3, rng, dtype=dtype)
        self.out = Conv2d(c1, 3, 3, rng, dtype=dtype)

    def forward(self, z):
        h = T.silu(self.conv0(z))
        h = T.silu(self.up1(T.upsample_nearest(h, 2)))
        h = T.silu(self.up2(T.upsample_nearest(h, 2)))
        return self.out(h)


class LatentCodec(Module):
    def __init__(self, rng, latent_channels: int = 4, hidden=(16, 32), dtype=np.float32):
        self.latent_channels = latent_channels
        self.hidden = tuple(hidden)
        self.encoder = Encoder(latent_channels, self.hidden, rng, dtype)
        self.decoder = Decoder(latent_channels, self.hidden, rng, dtype)
        self.scale_factor = 1.0

    downsample = DOWNSAMPLE

    def latent_shape(self, height: int, width: int) -> tuple:
        return (self.latent_channels, height // DOWNSAMPLE, width // DOWNSAMPLE)

    def _batched(self, x, ndim):
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=self.encoder.out.weight.dtype)
        single = x.ndim == ndim - 1
        if single:
            x = T.reshape(x, (1,) + x.shape)
        return x, single

    def encode(self, image) -> Tensor:
        x, single = self._batched(image, 4)
        if x.shape[1] != 3:
            raise DimensionError(f"expected RGB input, got {x.shape[1]} channels")
        h, w = x.shape[2:]
        if h % DOWNSAMPLE or w % DOWNSAMPLE:
            raise DimensionError(f"image dims {h}x{w} not divisible by {DOWNSAMPLE}")
        if np.abs(x.data).max(initial=0.0) > 1.0 + 1e-6:
            raise ContractError("pixel values must lie in [-1, 1]")
        z = T.scale(self.encoder(x), self.scale_factor)
        return z[0] if single else z

    def decode(self, latent) -> Tensor:
        z, single = self._batched(latent, 4)
        if z.shape[1] != self.latent_channels:
            raise CompatibilityError(
                f"latent has {z.shape[1]} channels but this codec expects {self.latent_channels}")
        out = T.clamp(self.decoder(T.scale(z, 1.0 / self.scale_factor)), -1.0, 1.0)
        return out[0] if single else out

    def encode_array(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        with T.no_grad():
            return np.concatenate([self.encode(images[i:i + batch]).data for i in range(0, len(images), batch)])

    def decode_array(self, latents: np.ndarray, batch: int = 64) -> np.ndarray:
        with T.no_grad():
            return np.concatenate([self.decode(latents[i:i + batch]).data for i in range(0, len(latents), batch)])

    def raw_latents(self, images: np.ndarray, batch: int = 64) -> np.ndarray:
        with T.no_grad():
            return np.concatenate([self.encoder(Tensor(images[i:i + batch])).data
                                   for i in range(0, len(images), batch)])

    def fit_scale(self, images: np.ndarray) -> float:
        std = float(np.std(self.raw_latents(images), dtype=np.float64))
        self.scale_factor = 1.0 / std if std > 0 else 1.0
        return self.scale_factor

    def to_checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {"type": "CODEC", "latent_channels": self.latent_channels, "hidden": list(self.hidden),
                "scale_factor": self.scale_factor}
        meta.update(metadata or {})
        return Checkpoint(self.state_dict(), meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "LatentCodec":
        if ckpt.kind != "CODEC":
            raise CompatibilityError(f"expected a CODEC checkpoint, found {ckpt.kind}")
        codec = cls(np.random.default_rng(0), ckpt.metadata["latent_channels"], ckpt.metadata["hidden"])
        codec.load_state_dict(ckpt.tensors)
        codec.scale_factor = float(ckpt.metadata["scale_factor"])
        return codec


class IdentityCodec:
    """Pixel-space bypass: the diffusion stack runs directly on images."""

    latent_channels = 3
    downsample = 1
    scale_factor = 1.0

    def latent_shape(self, height, width):
        return (3, height, width)

    def encode(self, image):
        return image if isinstance(image, Tensor) else Tensor(image)

    def decode(self, latent):
        return latent if isinstance(latent, Tensor) else Tensor(latent)

    def encode_array(self, images, batch=64):
        return np.asarray(images)

    def decode_array(self, latents, batch=64):
        return np.asarray(latents)


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """Peak signal-to-noise ratio for signals spanning [-1, 1] (peak-to-peak 2)."""
    err = float(np.mean((np.asarray(x, np.float64) - np.asarray(y, np.float64)) ** 2))
    return float("inf") if err == 0 else 10.0 * np.log10(4.0 / err)


@dataclass
class CodecReport:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    plateau: bool = False
    stopped_epoch: int | None = None


def reconstruction_mse(codec: LatentCodec, images: np.ndarray, batch: int = 64) -> float:
    if len(images) == 0:
        return float("nan")
    with T.no_grad():
        total = 0.0
        for i in range(0, len(images), batch):
            chunk = images[i:i + batch]
            rec = codec.decoder(codec.encoder(Tensor(chunk))).data
            total += float(np.sum((rec.astype(np.float64) - chunk) ** 2))
    return total / images.size


def train_codec(train_images: np.ndarray, val_images: np.ndarray, epochs: int = 20, lr: float = 2e-3,
                batch_size: int = 16, seed: int = 0, latent_channels: int = 4, patience: int = 3,
                log=None) -> tuple[LatentCodec, CodecReport]:
    """Fit the autoencoder by pixel MSE and set ``scale_factor`` from its latents.

    Training stops early when the held-out epoch MSE fails to improve for
    ``patience`` consecutive epochs; the best weights seen are kept.
    """
    if len(train_images) == 0:
        raise DataError("empty corpus: no training frames for the codec")
    rng = np.random.default_rng(seed)
    codec = LatentCodec(rng, latent_channels)
    order_rng = np.random.default_rng(seed + 1)
    opt = AdamW({"codec": list(codec.named_parameters())})
    report = CodecReport()
    best, best_state, stale = float("inf"), None, 0
    steps_per_epoch = int(np.ceil(len(train_images) / batch_size))
    for epoch in range(epochs):
        perm = order_rng.permutation(len(train_images))
        running = 0.0
        for s in range(steps_per_epoch):
            idx = np.sort(perm[s * batch_size:(s + 1) * batch_size])
            batch = Tensor(train_images[idx])
            rec = codec.decoder(codec.encoder(batch))
            loss = T.mse(rec, batch)
            loss.backward()
            opt.step({"codec": lr})
            opt.zero_grad()
            running += loss.item()
            if log is not None:
                log(epoch * steps_per_epoch + s, loss.item(), lr)
        report.train_mse.append(running / steps_per_epoch)
        val = reconstruction_mse(codec, val_images) if len(val_images) else report.train_mse[-1]
        report.val_mse.append(val)
        logger.info("codec epoch %d: train %.5f val %.5f", epoch, report.train_mse[-1], val)
        if val < best:
            best, best_state, stale = val, codec.state_dict(), 0
        else:
            stale += 1
            if stale >= patience:
                report.plateau = True
                report.stopped_epoch = epoch
                logger.info("codec validation MSE plateaued at epoch %d", epoch)
                break
    if best_state is not None:
        codec.load_state_dict(best_state)
    codec.fit_scale(train_images)
    return codec, report
