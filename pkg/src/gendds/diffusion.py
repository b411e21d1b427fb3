"""Noise schedule, training objective, guidance and samplers.

Samplers operate on numpy arrays and take a noise predictor
``eps_fn(x_t, t) -> eps``; ``t`` may be fractional for the Karras-ladder
sampler, which maps each sigma back onto the discrete schedule by
interpolating log-sigma.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError
from .tensor import Tensor
from .text import ConditioningMatrix

SAMPLERS = ("ddpm", "ddim", "dpmpp_2m")


class NoiseSchedule:
    """Linear beta schedule and the tables derived from it."""

    def __init__(self, steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02):
        if steps < 2 or not 0 < beta_start < beta_end < 1:
            raise ConfigurationError("need steps >= 2 and 0 < beta_start < beta_end < 1")
        self.steps = steps
        self.betas = np.linspace(beta_start, beta_end, steps, dtype=np.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)
        self.sigmas = np.sqrt((1.0 - self.alpha_bars) / self.alpha_bars)
        self.log_sigmas = np.log(self.sigmas)

    def __len__(self):
        return self.steps

    @property
    def sigma_min(self) -> float:
        return float(self.sigmas[1])

    @property
    def sigma_max(self) -> float:
        return float(self.sigmas[self.steps - 1])

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t >= self.steps):
            raise ContractError(f"timestep outside [0, {self.steps})")
        return t

    def sigma_to_t(self, sigma) -> np.ndarray:
        """Fractional timestep whose interpolated log-sigma equals ``log(sigma)``."""
        return np.interp(np.log(sigma), self.log_sigmas, np.arange(self.steps, dtype=np.float64))

    def t_to_sigma(self, t) -> np.ndarray:
        return np.exp(np.interp(t, np.arange(self.steps, dtype=np.float64), self.log_sigmas))

    def alpha_bar_at(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.issubdtype(t.dtype, np.integer):
            return self.alpha_bars[t]
        return 1.0 / (1.0 + self.t_to_sigma(t) ** 2)

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": float(self.betas[0]), "beta_end": float(self.betas[-1])}


def _per_sample(values, ndim: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def q_sample_at(x0, alpha_bar, eps) -> np.ndarray:
    """``sqrt(ab) * x0 + sqrt(1 - ab) * eps`` for an explicit cumulative alpha."""
    x0 = np.asarray(x0)
    ab = _per_sample(alpha_bar, x0.ndim)
    out = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps)
    return out.astype(x0.dtype, copy=False)


def q_sample(x0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Forward corruption of clean latents ``x0`` to timestep ``t`` with noise ``eps``."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ContractError(f"x0 {x0.shape} and noise {eps.shape} differ in shape")
    t = schedule.check_t(t)
    return q_sample_at(x0, schedule.alpha_bars[t], eps)


def diffusion_loss(x0, t_batch, eps_batch, model: Callable, cond, schedule: NoiseSchedule) -> Tensor:
    """Mean squared error between the drawn noise and the model's prediction."""
    x0 = np.asarray(x0)
    t_batch = np.asarray(t_batch)
    if t_batch.shape != (x0.shape[0],):
        raise ContractError(f"{t_batch.shape[0] if t_batch.ndim else 1} timesteps for a batch of {x0.shape[0]}")
    x_t = q_sample(x0, t_batch, eps_batch, schedule)
    pred = model(Tensor(x_t, dtype=x0.dtype), t_batch, cond)
    return T.mse(pred, Tensor(np.asarray(eps_batch, dtype=pred.dtype)))


def cfg_combine(eps_uncond, eps_cond, w: float) -> np.ndarray:
    """Guided noise ``eps_u + w * (eps_c - eps_u)``.

    Evaluated as ``eps_c + (w - 1) * (eps_c - eps_u)`` so that ``w = 1`` and
    identical branches reproduce the conditional prediction exactly; ``w = 0``
    returns the unconditional prediction.
    """
    eps_uncond = np.asarray(eps_uncond)
    eps_cond = np.asarray(eps_cond)
    if eps_uncond.shape != eps_cond.shape:
        raise ContractError(f"branch shapes differ: {eps_uncond.shape} vs {eps_cond.shape}")
    if w == 0:
        return eps_uncond.copy()
    return eps_cond + (w - 1.0) * (eps_cond - eps_uncond)


def karras_sigmas(n: int, sigma_min: float, sigma_max: float, rho: float = 7.0) -> np.ndarray:
    """``n`` descending noise levels from ``sigma_max`` to ``sigma_min`` plus a final 0."""
    if n < 2:
        raise ConfigurationError("the Karras ladder needs at least 2 steps")
    if not 0 < sigma_min < sigma_max:
        raise ConfigurationError("need 0 < sigma_min < sigma_max")
    ramp = np.arange(n, dtype=np.float64) / (n - 1)
    lo, hi = sigma_min ** (1.0 / rho), sigma_max ** (1.0 / rho)
    sigmas = (hi + ramp * (lo - hi)) ** rho
    sigmas[0], sigmas[-1] = sigma_max, sigma_min
    return np.append(sigmas, 0.0)


@dataclass
class SamplerConfig:
    kind: str = "dpmpp_2m"
    steps: int = 32
    cfg_scale: float = 7.5
    sigma_min: float | None = None
    sigma_max: float | None = None
    rho: float = 7.0
    eta: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SAMPLERS:
            raise ConfigurationError(f"unknown sampler {self.kind!r}; choose from {SAMPLERS}")
        if self.steps < 1:
            raise ConfigurationError("sampler needs at least one step")
        if self.cfg_scale < 0:
            raise ConfigurationError("guidance scale must be >= 0")
        if self.sigma_min is not None and self.sigma_max is not None and not self.sigma_min < self.sigma_max:
            raise ConfigurationError("sigma_min must be below sigma_max")

    def to_dict(self) -> dict:
        return asdict(self)


def ddim_timesteps(schedule: NoiseSchedule, n: int) -> np.ndarray:
    if n > schedule.steps:
        raise ConfigurationError(f"{n} steps exceed schedule length {schedule.steps}")
    return np.round(np.linspace(schedule.steps - 1, 0, n)).astype(np.int64)


def ddim_loop(eps_fn, shape, schedule: NoiseSchedule, steps: int, rng, eta: float = 0.0) -> np.ndarray:
    ts = ddim_timesteps(schedule, steps)
    x = rng.standard_normal(shape)
    for i, t in enumerate(ts):
        ab = schedule.alpha_bars[t]
        ab_prev = schedule.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps = np.asarray(eps_fn(x, np.full(shape[0], t)), dtype=np.float64)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        sigma = eta * np.sqrt((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev))
        x = np.sqrt(ab_prev) * x0 + np.sqrt(max(1.0 - ab_prev - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(shape)
    return x


def ddpm_loop(eps_fn, shape, schedule: NoiseSchedule, steps: int, rng) -> np.ndarray:
    """Ancestral sampling from the Gaussian posterior of the respaced chain."""
    ts = ddim_timesteps(schedule, steps)
    x = rng.standard_normal(shape)
    for i, t in enumerate(ts):
        ab = schedule.alpha_bars[t]
        ab_prev = schedule.alpha_bars[ts[i + 1]] if i + 1 < len(ts) else 1.0
        beta = 1.0 - ab / ab_prev
        eps = np.asarray(eps_fn(x, np.full(shape[0], t)), dtype=np.float64)
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        mean = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * x
        var = beta * (1.0 - ab_prev) / (1.0 - ab)
        x = mean
        if i + 1 < len(ts):
            x = x + np.sqrt(var) * rng.standard_normal(shape)
    return x


def dpmpp_2m_loop(eps_fn, shape, schedule: NoiseSchedule, sigmas: np.ndarray, rng) -> np.ndarray:
    """Second-order multistep solver in data-prediction form over a sigma ladder.

    The state lives in variance-exploding coordinates ``x = x0 + sigma * eps``;
    the noise predictor sees ``x / sqrt(1 + sigma^2)`` at the matching timestep.
    """
    x = rng.standard_normal(shape) * sigmas[0]
    old_denoised = None
    for i in range(len(sigmas) - 1):
        sigma, sigma_next = sigmas[i], sigmas[i + 1]
        t = schedule.sigma_to_t(sigma)
        eps = np.asarray(eps_fn(x / np.sqrt(1.0 + sigma**2), np.full(shape[0], t)), dtype=np.float64)
        denoised = x - sigma * eps
        if sigma_next == 0:
            x = denoised
        else:
            lam, lam_next = -np.log(sigma), -np.log(sigma_next)
            h = lam_next - lam
            if old_denoised is None:
                d = denoised
            else:
                h_last = lam - (-np.log(sigmas[i - 1]))
                r = h_last / h
                d = (1.0 + 1.0 / (2.0 * r)) * denoised - (1.0 / (2.0 * r)) * old_denoised
            x = (sigma_next / sigma) * x - np.expm1(-h) * d
        old_denoised = denoised
    return x


def run_sampler(eps_fn, shape, schedule: NoiseSchedule, config: SamplerConfig, rng=None) -> np.ndarray:
    """Integrate from pure noise to a clean sample of ``shape``."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if config.kind == "ddim":
        return ddim_loop(eps_fn, shape, schedule, config.steps, rng, config.eta)
    if config.kind == "ddpm":
        return ddpm_loop(eps_fn, shape, schedule, config.steps, rng)
    lo = schedule.sigma_min if config.sigma_min is None else config.sigma_min
    hi = schedule.sigma_max if config.sigma_max is None else config.sigma_max
    if config.steps == 1:
        sigmas = np.array([hi, 0.0])
    else:
        sigmas = karras_sigmas(config.steps, lo, hi, config.rho)
    return dpmpp_2m_loop(eps_fn, shape, schedule, sigmas, rng)


def gaussian_optimal_eps(schedule: NoiseSchedule, s: float):
    """Exact noise predictor when clean data is ``N(0, s^2 I)``."""
    def eps_fn(x_t, t):
        ab = _per_sample(schedule.alpha_bar_at(t), np.ndim(x_t))
        return np.sqrt(1.0 - ab) / (ab * s * s + 1.0 - ab) * x_t

    return eps_fn


@dataclass
class ConditioningBundle:
    """Everything that steers one denoising call.

    ``cond`` and ``uncond`` hold one row per sample; ``depth`` is an optional
    ``[B, 1, H, W]`` control map; ``cfg_scale`` overrides the sampler default.
    """

    cond: ConditioningMatrix
    uncond: ConditioningMatrix
    depth: np.ndarray | None = None
    cfg_scale: float | None = None


def guided_eps(denoiser, bundle: ConditioningBundle, w: float):
    """Noise predictor evaluating both guidance branches in a single batch."""
    both = ConditioningMatrix.concat([bundle.uncond.detach(), bundle.cond.detach()])
    depth = None if bundle.depth is None else np.concatenate([bundle.depth, bundle.depth], axis=0)

    def eps_fn(x, t):
        n = x.shape[0]
        x_in = np.concatenate([x, x], axis=0)
        t_in = np.concatenate([t, t], axis=0)
        out = np.asarray(denoiser.predict(x_in, t_in, both, depth), dtype=np.float64)
        return cfg_combine(out[:n], out[n:], w)

    return eps_fn


def sample(denoiser, codec, bundle: ConditioningBundle, sampler: SamplerConfig, latent_shape,
           schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Generate decoded images ``[B, 3, H, W]`` in ``[-1, 1]``.

    ``denoiser`` exposes ``predict(x_t, t, cond, depth)``; ``codec`` exposes
    ``decode`` (use :class:`gendds.codec.IdentityCodec` to stay in pixel space).
    """
    schedule = schedule or NoiseSchedule()
    latent_shape = tuple(latent_shape)
    if bundle.cond.batch != latent_shape[0] or bundle.uncond.batch != latent_shape[0]:
        raise ContractError(f"conditioning batch does not match latent batch {latent_shape[0]}")
    w = sampler.cfg_scale if bundle.cfg_scale is None else bundle.cfg_scale
    latents = run_sampler(guided_eps(denoiser, bundle, w), latent_shape, schedule, sampler)
    dtype = getattr(denoiser, "dtype", np.float32)
    return codec.decode_array(latents.astype(dtype))
