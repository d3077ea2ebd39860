"""Linear-beta DDPM schedule, forward/reverse kernels and the sampling loop.

Diffusion steps are 1-based: ``tau`` runs from 1 to ``T_diff``. Arrays in
:class:`NoiseSchedule` are indexed with ``tau - 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics import Rng, Tensor, as_tensor, no_grad
from .numerics import ops


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    @property
    def T_diff(self) -> int:
        return len(self.betas)

    def check_tau(self, tau) -> np.ndarray:
        t = np.asarray(tau)
        if t.size == 0 or np.any(t < 1) or np.any(t > self.T_diff):
            raise ValueError(f"diffusion step must lie in [1, {self.T_diff}], got {tau}")
        return t.astype(np.int64)


def schedule_from_betas(betas) -> NoiseSchedule:
    betas = np.asarray(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size == 0 or np.any(betas <= 0) or np.any(betas >= 1):
        raise ValueError("betas must be a nonempty 1-D array inside (0, 1)")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
    return NoiseSchedule(betas, alphas, alpha_bars, posterior_vars)


def build_linear_schedule(T_diff: int, beta_start: float = 1e-4, beta_end: float = 1e-1) -> NoiseSchedule:
    if T_diff < 1:
        raise ValueError(f"T_diff must be >= 1, got {T_diff}")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})")
    return schedule_from_betas(np.linspace(beta_start, beta_end, T_diff))


def _coef(values: np.ndarray, tau, ndim: int, dtype) -> np.ndarray | float:
    """Per-sample coefficient broadcastable against a (B, ...) tensor."""
    c = values[np.asarray(tau) - 1]
    if np.ndim(c) == 0:
        return float(c)
    return c.reshape((-1,) + (1,) * (ndim - 1)).astype(dtype)


def _scale(x: Tensor, c) -> Tensor:
    if isinstance(c, float):
        return ops.affine(x, c)
    return ops.mul(x, Tensor(c))


def q_sample(x0, tau, eps, sched: NoiseSchedule) -> Tensor:
    """Noisy input at step ``tau``: sqrt(abar) * x0 + sqrt(1 - abar) * eps."""
    tau = sched.check_tau(tau)
    x0, eps = as_tensor(x0), as_tensor(eps)
    a = _coef(np.sqrt(sched.alpha_bars), tau, x0.ndim, x0.data.dtype)
    s = _coef(np.sqrt(1.0 - sched.alpha_bars), tau, x0.ndim, x0.data.dtype)
    return ops.add(_scale(x0, a), _scale(eps, s))


def predict_x0_from_eps(x_tau, tau, eps_hat, sched: NoiseSchedule) -> Tensor:
    """Invert the closed-form marginal for the clean signal."""
    tau = sched.check_tau(tau)
    x_tau, eps_hat = as_tensor(x_tau), as_tensor(eps_hat)
    inv_a = _coef(1.0 / np.sqrt(sched.alpha_bars), tau, x_tau.ndim, x_tau.data.dtype)
    s = _coef(np.sqrt(1.0 - sched.alpha_bars), tau, x_tau.ndim, x_tau.data.dtype)
    return _scale(ops.sub(x_tau, _scale(eps_hat, s)), inv_a)


def reverse_mean(x_tau, tau, eps_hat, sched: NoiseSchedule) -> Tensor:
    tau = sched.check_tau(tau)
    x_tau, eps_hat = as_tensor(x_tau), as_tensor(eps_hat)
    k = _coef(sched.betas / np.sqrt(1.0 - sched.alpha_bars), tau, x_tau.ndim, x_tau.data.dtype)
    inv = _coef(1.0 / np.sqrt(sched.alphas), tau, x_tau.ndim, x_tau.data.dtype)
    return _scale(ops.sub(x_tau, _scale(eps_hat, k)), inv)


def p_sample_step(x_tau, tau: int, eps_hat, sched: NoiseSchedule, rng: Rng) -> Tensor:
    """One ancestral step; the final step (tau = 1) adds no noise."""
    tau = int(sched.check_tau(tau))
    mean = reverse_mean(x_tau, tau, eps_hat, sched)
    var = sched.posterior_vars[tau - 1]
    if tau == 1 or var == 0.0:
        return mean
    z = rng.normal(mean.shape)
    return Tensor(mean.data + np.sqrt(var).astype(mean.data.dtype) * z)


Denoiser = Callable[[Tensor, np.ndarray], Tensor]


def sample_loop(denoiser: Denoiser, sched: NoiseSchedule, shape, rng: Rng) -> Tensor:
    """Run the reverse chain from pure noise down to step 1."""
    shape = tuple(shape)
    x = Tensor(rng.normal(shape))
    with no_grad():
        for tau in range(sched.T_diff, 0, -1):
            taus = np.full(shape[0], tau, dtype=np.int64)
            eps_hat = denoiser(x, taus)
            x = p_sample_step(x, tau, eps_hat, sched, rng)
    return x


def ddpm_loss(denoiser: Denoiser, x0, sched: NoiseSchedule, rng: Rng) -> Tensor:
    """Mean squared error between injected and predicted noise.

    One step is drawn per batch element.
    """
    return ddpm_loss_and_estimate(denoiser, x0, sched, rng)[0]


def ddpm_loss_and_estimate(denoiser: Denoiser, x0, sched: NoiseSchedule, rng: Rng) -> tuple[Tensor, Tensor]:
    """Denoising loss plus the differentiable one-step clean-signal estimate."""
    x0 = as_tensor(x0)
    if x0.shape[0] == 0:
        raise ValueError("ddpm_loss: empty batch")
    tau = rng.integers(1, sched.T_diff + 1, (x0.shape[0],))
    eps = Tensor(rng.normal(x0.shape))
    x_tau = q_sample(x0, tau, eps, sched)
    eps_hat = denoiser(x_tau, tau)
    loss = ops.mean(ops.square(ops.sub(eps, eps_hat)))
    return loss, predict_x0_from_eps(x_tau, tau, eps_hat, sched)
