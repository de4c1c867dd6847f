"""DDPM mathematics: linear noise schedule, forward noising, L_simple and ancestral sampling.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and index ``t`` of
``beta``/``alpha``/``sigma`` is stored at position ``t - 1``.  ``alpha_bar`` has
length ``T + 1`` with ``alpha_bar[0] == 1``, so it is indexed by ``t`` directly.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .errors import ConfigurationError

RNG = Union[np.random.Generator, Sequence[np.random.Generator]]
# (xt, t) -> predicted noise, same shape as xt
EpsModel = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ValueError(f"timesteps must lie in [1, {self.T}], got range [{t.min()}, {t.max()}]")
        return t


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """Linear variance schedule with all derived tables, in double precision."""
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}")
    T = int(T)
    if T == 1:
        beta = np.array([beta_start], dtype=np.float64)
    else:
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alpha = 1.0 - beta
    alpha_bar = np.empty(T + 1, dtype=np.float64)
    alpha_bar[0] = 1.0
    for i in range(T):
        alpha_bar[i + 1] = alpha_bar[i] * alpha[i]
    sigma = np.sqrt((1.0 - alpha_bar[:-1]) / (1.0 - alpha_bar[1:]) * beta)
    for arr in (beta, alpha, alpha_bar, sigma):
        arr.flags.writeable = False
    return NoiseSchedule(T=T, beta=beta, alpha=alpha, alpha_bar=alpha_bar, sigma=sigma)


def _per_item(values: np.ndarray, ndim: int) -> np.ndarray:
    return values.reshape((-1,) + (1,) * (ndim - 1))


def q_sample(x0: np.ndarray, t, eps: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Noise ``x0`` to timestep ``t`` in one step: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    t = np.broadcast_to(sched.check_t(t), (x0.shape[0],))
    abar = _per_item(sched.alpha_bar[t], x0.ndim)
    return np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps


def posterior_mean(xt: np.ndarray, t, eps_hat: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Mean of the reverse kernel, parameterised by the predicted noise."""
    xt = np.asarray(xt, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if xt.shape != eps_hat.shape:
        raise ValueError(f"eps_hat shape {eps_hat.shape} does not match xt shape {xt.shape}")
    t = np.broadcast_to(sched.check_t(t), (xt.shape[0],))
    beta = _per_item(sched.beta[t - 1], xt.ndim)
    abar = _per_item(sched.alpha_bar[t], xt.ndim)
    return (xt - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(1.0 - beta)


def draw_noise(sched: NoiseSchedule, n: int, image_shape: tuple, rng: RNG) -> tuple[np.ndarray, np.ndarray]:
    """Draw one ``(t, eps)`` pair per item.

    ``rng`` is either a single generator, consumed item by item, or one generator
    per item.  Per-item generators make the draws independent of batch order.
    """
    if isinstance(rng, np.random.Generator):
        gens = [rng] * n
    else:
        gens = list(rng)
        if len(gens) != n:
            raise ValueError(f"expected {n} per-item generators, got {len(gens)}")
    t = np.empty(n, dtype=np.int64)
    eps = np.empty((n,) + tuple(image_shape), dtype=np.float64)
    for i, g in enumerate(gens):
        t[i] = g.integers(1, sched.T + 1)
        eps[i] = g.standard_normal(image_shape)
    return t, eps


def per_item_losses(eps: np.ndarray, eps_pred: np.ndarray) -> np.ndarray:
    diff = np.asarray(eps, dtype=np.float64) - np.asarray(eps_pred, dtype=np.float64)
    return np.sum(diff.reshape(diff.shape[0], -1) ** 2, axis=1)


def simple_loss(denoiser, batch: np.ndarray, sched: NoiseSchedule, rng: RNG) -> float:
    """Batch mean of ||eps - eps_theta(x_t, t)||^2 with fresh (t, eps) draws per image.

    ``denoiser`` is any callable ``(xt, t) -> eps_pred``; a
    :class:`~feddiffuse.model.Denoiser` qualifies.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("batch must be nonempty")
    t, eps = draw_noise(sched, batch.shape[0], batch.shape[1:], rng)
    xt = q_sample(batch, t, eps, sched)
    return float(np.mean(per_item_losses(eps, denoiser(xt, t))))


def ddpm_sample(denoiser, sched: NoiseSchedule, n: int, shape: tuple, rng: np.random.Generator,
                clip: bool = False) -> np.ndarray:
    """Ancestral sampling from x_T ~ N(0, I) down to x_0.

    ``shape`` is the per-image shape ``(channels, height, width)``.  No noise is
    added on the final step.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x = rng.standard_normal((n,) + tuple(shape))
    for t in range(sched.T, 0, -1):
        tt = np.full(n, t, dtype=np.int64)
        x_mean = posterior_mean(x, tt, denoiser(x, tt), sched)
        if t > 1:
            x = x_mean + sched.sigma[t - 1] * rng.standard_normal(x.shape)
        else:
            x = x_mean
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x

