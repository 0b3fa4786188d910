"""Variance-preserving noise schedule, forward noising, eps-loss and ancestral sampling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import nn
from .errors import ConfigError, ContractError, NumericError
from .tensor import Tensor

# denoiser(z_t, t, condition, env_ctx) -> eps_hat
Denoiser = Callable[[Tensor, np.ndarray, np.ndarray, Optional[Tensor]], Tensor]


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    @classmethod
    def from_betas(cls, betas) -> NoiseSchedule:
        beta = np.asarray(betas, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 1:
            raise ConfigError("schedule needs at least one step")
        if np.any(beta <= 0) or np.any(beta >= 1):
            raise ConfigError("every beta must lie strictly inside (0, 1)")
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        if alpha_bar[-1] <= 0:
            raise ConfigError("alpha_bar underflowed to zero")
        for arr in (beta, alpha, alpha_bar):
            arr.setflags(write=False)
        return cls(beta, alpha, alpha_bar)

    def ab(self, t) -> np.ndarray:
        """alpha_bar at 1-based timestep(s) ``t``."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ContractError(f"timestep outside [1, {self.T}]")
        return self.alpha_bar[t - 1]


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 0.02,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ConfigError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ConfigError("need 0 < beta_start <= beta_end < 1")
    betas = [beta_end] if T == 1 else np.linspace(beta_start, beta_end, T)
    return NoiseSchedule.from_betas(betas)


def _coef(values: np.ndarray, like: np.ndarray) -> np.ndarray:
    """Per-sample coefficient broadcast against a batch ``[B, ...]``."""
    values = np.asarray(values, dtype=like.dtype)
    if values.ndim == 0:
        return values
    return values.reshape((-1,) + (1,) * (like.ndim - 1))


def q_sample(z0, t, eps, sched: NoiseSchedule):
    """Closed-form ``z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps``.

    ``t`` is a 1-based int or one timestep per batch element.
    """
    z0_arr = z0.data if isinstance(z0, Tensor) else np.asarray(z0)
    eps_arr = eps.data if isinstance(eps, Tensor) else np.asarray(eps)
    if z0_arr.shape != eps_arr.shape:
        raise ContractError(f"eps shape {eps_arr.shape} != z0 shape {z0_arr.shape}")
    ab = sched.ab(t)
    a = _coef(np.sqrt(ab), z0_arr)
    s = _coef(np.sqrt(1.0 - ab), z0_arr)
    if isinstance(z0, Tensor) or isinstance(eps, Tensor):
        z0_t = z0 if isinstance(z0, Tensor) else Tensor(z0_arr)
        eps_t = eps if isinstance(eps, Tensor) else Tensor(eps_arr)
        return z0_t * a + eps_t * s
    return a * z0_arr + s * eps_arr


def eps_loss(denoiser: Denoiser, z0, t, eps, condition, env_ctx=None,
             sched: NoiseSchedule | None = None) -> Tensor:
    """Mean squared error between injected and predicted noise."""
    if sched is None:
        raise ContractError("eps_loss needs the noise schedule")
    z_t = q_sample(z0, t, eps, sched)
    z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    eps_hat = denoiser(z_t, np.atleast_1d(t), condition, env_ctx)
    eps_t = eps if isinstance(eps, Tensor) else Tensor(np.asarray(eps, dtype=eps_hat.dtype))
    if eps_hat.shape != eps_t.shape:
        raise ContractError(f"prediction shape {eps_hat.shape} != noise shape {eps_t.shape}")
    return nn.mse(eps_hat, eps_t)


def ddpm_step(z_t: np.ndarray, eps_hat: np.ndarray, t: int, sched: NoiseSchedule,
              noise: np.ndarray) -> np.ndarray:
    """Ancestral update ``z_t -> z_{t-1}`` with variance ``beta_t``."""
    if not 1 <= t <= sched.T:
        raise ContractError(f"timestep {t} outside [1, {sched.T}]")
    if t == 1 and np.any(noise != 0):
        raise ContractError("noise must be zero at the final step (t = 1)")
    beta = sched.beta[t - 1]
    mean = (z_t - (beta / np.sqrt(1.0 - sched.alpha_bar[t - 1])) * eps_hat) / np.sqrt(sched.alpha[t - 1])
    out = mean + np.sqrt(beta) * noise
    return out.astype(z_t.dtype, copy=False)


def chain_rng(seed: int, chain_id: int) -> np.random.Generator:
    """Counter-based stream for one sampling chain."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, chain_id])))


def sample(denoiser: Denoiser, condition, sched: NoiseSchedule, seed: int,
           shape: tuple, env_partner=None, chain_id: int = 0, dtype=np.float32) -> np.ndarray:
    """Run the full reverse chain for a batch of conditions.

    ``condition`` is ``[B, d_p]``; ``shape`` the per-sample latent shape.
    ``env_partner`` is an optional fixed context or ``callable(t) -> context``.
    Returns latents ``[B, *shape]``.
    """
    condition = np.asarray(condition.data if isinstance(condition, Tensor) else condition)
    n = condition.shape[0]
    rng = chain_rng(seed, chain_id)
    z = rng.standard_normal((n,) + tuple(shape)).astype(dtype)
    for t in range(sched.T, 0, -1):
        ctx = env_partner(t) if callable(env_partner) else env_partner
        eps_hat = denoiser(Tensor(z), np.full(n, t), condition, ctx).data
        noise = rng.standard_normal(z.shape).astype(dtype) if t > 1 else np.zeros_like(z)
        z = ddpm_step(z, eps_hat, t, sched, noise)
        if not np.all(np.isfinite(z)):
            raise NumericError(f"sampling diverged at step t={t}")
    return z
