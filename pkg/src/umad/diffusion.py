"""Cosine-schedule DDPM: forward noising, ancestral reverse steps, and windowed restoration."""

import math
from dataclasses import dataclass

import numpy as np
import torch

from .data_synth import FrameSequence


@dataclass
class NoiseSchedule:
    T: int
    beta: np.ndarray  # index 1..T (beta[0] unused, 0)
    alpha: np.ndarray  # index 1..T (alpha[0] = 1)
    alpha_bar: np.ndarray  # index 0..T

    def posterior_variance(self, t):
        """Fixed-small variance ``beta_t (1 - abar_{t-1}) / (1 - abar_t)``."""
        return self.beta[t] * (1 - self.alpha_bar[t - 1]) / (1 - self.alpha_bar[t])


def cosine_schedule(T, s=0.008, max_beta=0.999):
    if T < 1:
        raise ValueError(f"number of diffusion steps must be >= 1, got {T}")

    def f(t):
        return math.cos((t / T + s) / (1 + s) * math.pi / 2) ** 2

    f0 = f(0)
    alpha_bar = np.array([f(t) / f0 for t in range(T + 1)])
    alpha_bar[0] = 1.0
    beta = np.zeros(T + 1)
    beta[1:] = np.minimum(1 - alpha_bar[1:] / alpha_bar[:-1], max_beta)
    alpha = 1 - beta
    return NoiseSchedule(T, beta, alpha, alpha_bar)


def _per_sample(values, t, like):
    """Gather schedule entries for step(s) ``t`` and shape them to broadcast against ``like``."""
    v = torch.as_tensor(values, dtype=like.dtype)[torch.as_tensor(t).long()]
    if v.ndim == 0:
        return v
    return v.reshape(-1, *([1] * (like.ndim - 1)))


def _check_step(t, schedule, lo=0):
    tt = torch.as_tensor(t)
    if (tt < lo).any() or (tt > schedule.T).any():
        raise IndexError(f"diffusion step {t} outside [{lo}, {schedule.T}]")


def q_sample(x0, t, noise, schedule):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``; t = 0 is accepted and returns x0."""
    _check_step(t, schedule)
    ab = _per_sample(schedule.alpha_bar, t, x0)
    return torch.sqrt(ab) * x0 + torch.sqrt(1 - ab) * noise


def predict_x0(x_t, t, eps, schedule):
    ab = _per_sample(schedule.alpha_bar, t, x_t)
    return (x_t - torch.sqrt(1 - ab) * eps) / torch.sqrt(ab)


@dataclass
class SamplerConfig:
    T: int = 25
    seed: int = 0
    variance_mode: str = "fixed_small"
    clip_denoised: bool = True

    def __post_init__(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if self.variance_mode != "fixed_small":
            raise ValueError("only the fixed_small variance is supported")


def p_sample_step(x_t, t, eps_model, schedule, generator=None, clip_denoised=False, noise=None):
    """One ancestral step ``x_t -> x_{t-1}``; no noise is added at t = 1.

    ``eps_model(x_t, t)`` returns the predicted noise. Without clipping the mean
    is ``(x_t - beta_t / sqrt(1 - abar_t) * eps) / sqrt(alpha_t)``; with
    ``clip_denoised`` the implied x0 is clamped to [-1, 1] and the posterior mean
    is formed from it instead. ``noise`` supplies z directly instead of drawing it.
    """
    _check_step(t, schedule, lo=1)
    t = int(t)
    eps = eps_model(x_t, t)
    beta, alpha, ab = schedule.beta[t], schedule.alpha[t], schedule.alpha_bar[t]
    if clip_denoised:
        x0 = predict_x0(x_t, t, eps, schedule).clamp(-1, 1)
        ab_prev = schedule.alpha_bar[t - 1]
        mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 + (math.sqrt(alpha) * (1 - ab_prev) / (1 - ab)) * x_t
    else:
        mean = (x_t - (beta / math.sqrt(1 - ab)) * eps) / math.sqrt(alpha)
    if t == 1:
        return mean
    z = noise if noise is not None else torch.randn(x_t.shape, generator=generator, dtype=x_t.dtype)
    return mean + math.sqrt(schedule.posterior_variance(t)) * z


def sample_loop(shape, eps_model, schedule, generator, clip_denoised=True, dtype=torch.float32):
    x = torch.randn(shape, generator=generator, dtype=dtype)
    for t in range(schedule.T, 0, -1):
        x = p_sample_step(x, t, eps_model, schedule, generator, clip_denoised)
    return x


def window_generator(seed, index):
    g = torch.Generator()
    g.manual_seed((int(seed) * 1_000_003 + int(index)) % (2 ** 63))
    return g


def restore(f_deg, model, sampler=None, f_raw_downsampled=None, quality_q=1.0, ablation="full",
            patch_size=None):
    """Restore every frame of ``f_deg`` with the full reverse loop per target window.

    Windows end at targets t = L-1 .. T-1; restored window frames are averaged
    where windows overlap. ``f_raw_downsampled`` optionally replaces the degraded
    target frame as global-context input (it must then be one frame per input
    frame, or a single frame used for all). ``patch_size`` restores square
    patches independently and stitches them by averaging.
    """
    from .model import restore_sequence

    sampler = sampler or SamplerConfig()
    return restore_sequence(model, f_deg, sampler, f_raw_downsampled=f_raw_downsampled, quality_q=quality_q,
                            ablation=ablation, patch_size=patch_size)


def to_frames(x):
    """(T, C, H, W) tensor -> FrameSequence clamped to [0, 1]."""
    return FrameSequence(x.detach().double().clamp(0, 1).permute(0, 2, 3, 1).numpy())
