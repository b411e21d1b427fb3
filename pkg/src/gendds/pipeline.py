"""The assembled generator: tag encoder + U-Net, optional adapters, control and temporal parts."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, content_hash
from .diffusion import ConditioningBundle, NoiseSchedule, SamplerConfig, guided_eps, run_sampler
from .errors import CompatibilityError, ConfigurationError
from .nn import Module
from .tensor import Tensor
from .text import ConditioningMatrix, TagEncoder, TagVocabulary, tokenize
from .unet import UNet, UNetConfig


@dataclass
class TextConfig:
    dim: int = 64
    layers: int = 2
    heads: int = 4
    max_len: int = 16

    def to_dict(self) -> dict:
        return asdict(self)


class DiffusionModel(Module):
    """Tag encoder and denoising U-Net sharing one vocabulary."""

    def __init__(self, unet_config: UNetConfig, text_config: TextConfig, vocab: TagVocabulary, rng=None,
                 dtype=np.float32):
        rng = np.random.default_rng(0) if rng is None else rng
        if unet_config.context_dim != text_config.dim:
            raise ConfigurationError(
                f"U-Net context width {unet_config.context_dim} != tag encoder width {text_config.dim}")
        self.text = TagEncoder(len(vocab), rng, text_config.dim, text_config.layers, text_config.heads,
                               text_config.max_len, dtype)
        self.unet = UNet(unet_config, rng, dtype)
        self._vocab = vocab
        self._text_config = text_config
        self._unconditional = False

    @property
    def vocab(self) -> TagVocabulary:
        return self._vocab

    @property
    def dtype(self):
        return self.unet.conv_in.weight.dtype

    @property
    def unconditional_only(self) -> bool:
        return self._unconditional

    def token_ids(self, prompts) -> np.ndarray:
        return np.stack([tokenize(p, self._vocab, self._text_config.max_len).ids for p in prompts])

    def encode_prompts(self, prompts) -> ConditioningMatrix:
        return self.text(self.token_ids(prompts))

    def unconditional(self, batch: int) -> ConditioningMatrix:
        return self.text.unconditional(batch)

    def base_hash(self) -> str:
        return content_hash(self.state_dict())

    def to_checkpoint(self, metadata: dict | None = None) -> Checkpoint:
        meta = {"type": "BASE", "unet": self.unet.config.to_dict(), "text": self._text_config.to_dict(),
                "vocab": self._vocab.tags, "vocab_sha256": self._vocab.digest(),
                "unconditional": self._unconditional}
        meta.update(metadata or {})
        return Checkpoint(self.state_dict(), meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "DiffusionModel":
        if ckpt.kind != "BASE":
            raise CompatibilityError(f"expected a BASE checkpoint, found {ckpt.kind}")
        meta = ckpt.metadata
        model = cls(UNetConfig.from_dict(meta["unet"]), TextConfig(**meta["text"]), TagVocabulary(meta["vocab"]))
        model.load_state_dict(ckpt.tensors)
        model._unconditional = bool(meta.get("unconditional", False))
        return model


class Denoiser:
    """``predict(x_t, t, cond, depth)`` over numpy arrays, without recording gradients.

    With a video model the rows of ``x_t`` are frames, grouped by clip.
    """

    def __init__(self, model: DiffusionModel, control=None, video=None, frames: int = 1):
        self.model = model
        self.control = control
        self.video = video
        self.frames = frames
        self.dtype = model.dtype

    def forward(self, z, t, cond, depth=None) -> Tensor:
        unet = self.model.unet
        residuals = None
        if self.control is not None:
            if depth is None:
                raise ConfigurationError("control branch enabled but no depth maps were provided")
            residuals = self.control(z, t, cond, depth)
        if self.video is not None:
            return unet(z, t, cond, control=residuals, hook=self.video.hooks(self.frames))
        return unet(z, t, cond, control=residuals)

    def predict(self, x, t, cond, depth=None) -> np.ndarray:
        with T.no_grad():
            return self.forward(Tensor(np.asarray(x, dtype=self.dtype)), t, cond, depth).data


def generate(model: DiffusionModel, codec, prompts, sampler: SamplerConfig, frames: int = 1, video=None,
             control=None, depth=None, schedule: NoiseSchedule | None = None, resolution: int = 32) -> np.ndarray:
    """Decoded samples ``[B, F, 3, H, W]`` in [-1, 1] for a list of prompts.

    ``depth`` is ``[B, F, 1, H, W]`` when a control branch is given.  A
    model trained with every prompt dropped uses the NULL prompt for both
    guidance branches.
    """
    schedule = schedule or NoiseSchedule()
    prompts = list(prompts)
    b = len(prompts)
    if video is None and frames != 1:
        raise ConfigurationError("multi-frame generation needs a temporal model")
    if video is not None and video.frames != frames:
        raise ConfigurationError(f"temporal model expects F={video.frames}, asked for {frames}")
    if control is not None and depth is None:
        raise ConfigurationError("control branch enabled but no depth maps were provided")
    with T.no_grad():
        uncond = model.unconditional(b)
        cond = uncond if model.unconditional_only else model.encode_prompts(prompts)
    flat_depth = None
    if depth is not None:
        depth = np.asarray(depth, dtype=model.dtype)
        flat_depth = depth.reshape((b * frames,) + depth.shape[2:])
    bundle = ConditioningBundle(cond.repeat(frames), uncond.repeat(frames), flat_depth)
    denoiser = Denoiser(model, control, video, frames)
    shape = (b * frames,) + tuple(codec.latent_shape(resolution, resolution))
    latents = run_sampler(guided_eps(denoiser, bundle, sampler.cfg_scale), shape, schedule, sampler)
    images = codec.decode_array(latents.astype(model.dtype))
    return images.reshape((b, frames) + images.shape[1:])
