"""Quadratic noise schedule, forward noising, epsilon loss and the ancestral sampler."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .tensor import Tensor

Denoiser = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    """Tables indexed by timestep ``t = 1..T``; index 0 holds ``alpha_bar_0 = 1``."""

    T: int
    betas: np.ndarray = field(repr=False)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def beta(self, t) -> np.ndarray:
        return self.betas[self._index(t)]

    def alpha(self, t) -> np.ndarray:
        return 1.0 - self.betas[self._index(t)]

    def alpha_bar(self, t) -> np.ndarray:
        """``alpha_bar_t`` for ``t`` in ``0..T``."""
        t = np.asarray(t)
        ab = np.concatenate([[1.0], self.alpha_bars])
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [0, {self.T}]")
        return ab[t]

    def posterior_variance(self, t) -> np.ndarray:
        """Variance of q(z_{t-1} | z_t, z_0); used only as a reference."""
        t = np.asarray(t)
        return self.beta(t) * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bar(t))

    def _index(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]")
        return t - 1


def build_schedule(T_steps: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> NoiseSchedule:
    """Betas linear in sqrt-space, hence quadratic in t."""
    if T_steps < 2:
        raise ValueError("need at least 2 timesteps")
    if not 0 < beta_min < beta_max < 1:
        raise ValueError(f"need 0 < beta_min < beta_max < 1, got {beta_min}, {beta_max}")
    frac = np.arange(T_steps) / (T_steps - 1)
    betas = (np.sqrt(beta_min) + frac * (np.sqrt(beta_max) - np.sqrt(beta_min))) ** 2
    betas[0], betas[-1] = beta_min, beta_max
    return NoiseSchedule(T_steps, betas)


def _per_sample(values: np.ndarray, ndim: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return values.reshape(values.shape + (1,) * (ndim - values.ndim))


def add_noise(schedule: NoiseSchedule, z0: np.ndarray, t, eps: np.ndarray) -> np.ndarray:
    """Closed-form ``q(z_t | z_0)``: ``sqrt(ab_t) z_0 + sqrt(1 - ab_t) eps``.

    ``t`` is a scalar or one timestep per leading-axis sample.
    """
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > schedule.T):
        raise ValueError(f"timestep out of range [1, {schedule.T}]")
    ab = _per_sample(schedule.alpha_bar(t), np.ndim(z0))
    return (np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps).astype(np.asarray(z0).dtype, copy=False)


def predict_x0(schedule: NoiseSchedule, zt: np.ndarray, t, eps_hat: np.ndarray) -> np.ndarray:
    ab = _per_sample(schedule.alpha_bar(t), np.ndim(zt))
    return (zt - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)


def mse_loss(target, pred) -> Tensor:
    """Element-mean squared error."""
    target = target if isinstance(target, Tensor) else T.tensor(target)
    pred = pred if isinstance(pred, Tensor) else T.tensor(pred)
    if target.shape != pred.shape:
        raise T.ShapeError(f"mse_loss: shapes {target.shape} and {pred.shape} differ")
    return T.mean(T.square(pred - target))


def ddpm_step(schedule: NoiseSchedule, zt: np.ndarray, eps_hat: np.ndarray, t: int,
              noise: np.ndarray | None = None) -> np.ndarray:
    """One ancestral step with fixed variance ``beta_t``; no noise at ``t = 1``."""
    beta = schedule.beta(t)
    alpha = 1.0 - beta
    ab = schedule.alpha_bar(t)
    mean = (zt - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(alpha)
    if t > 1 and noise is not None:
        mean = mean + np.sqrt(beta) * noise
    return mean


def sample(model: Denoiser, schedule: NoiseSchedule, shape: tuple[int, ...], context: np.ndarray,
           seed: int) -> np.ndarray:
    """Full T-step ancestral sampling loop; deterministic for a given seed.

    ``model(z_t, t, context)`` returns predicted noise for a batch, with
    ``t`` an integer array of one timestep per sample.
    """
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(shape)
    for t in range(schedule.T, 0, -1):
        ts = np.full(shape[0], t)
        eps_hat = np.asarray(model(z, ts, context), dtype=np.float64)
        if not np.isfinite(eps_hat).all():
            raise T.NonFiniteError(f"denoiser produced non-finite output at t={t}")
        noise = rng.standard_normal(shape) if t > 1 else None
        z = ddpm_step(schedule, z, eps_hat, t, noise)
    return z
