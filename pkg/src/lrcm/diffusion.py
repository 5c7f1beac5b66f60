"""Noise schedule, forward corruption, denoising loss, and the guided sampler.

The model passed to these functions is any callable
``model(x, n, cond_a, cond_t, **kw)`` returning a noise prediction with x's
shape (as a numerics Tensor or ndarray).  Conditions are opaque here: ``None``
means the modality is dropped and the model substitutes its learned null
embedding.  The guided step composes conditional and unconditional noise
estimates with the audio scale gamma and text scale delta; gamma=delta=0
degenerates to unconditional sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation
from .numerics import Tensor

Array = np.ndarray


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step variance table and the cumulative corruption coefficients.

    Arrays are indexed by step n in 1..steps; slot 0 holds the clean-data
    conventions (alpha_bar[0] = 1, beta_bar[0] = 0) which also make the
    posterior variance at n=1 exactly zero.
    """

    steps: int
    beta: Array            # beta[n], per-step variance
    alpha: Array           # sqrt(1 - beta[n])
    alpha_bar: Array       # prod alpha[1..n]; mean coefficient of q(x_n | x_0)
    beta_bar: Array        # sqrt(1 - alpha_bar^2); noise scale of q(x_n | x_0)
    posterior_var: Array   # variance of the reverse-step Gaussian
    kappa: Array           # per-step loss weight (1 by default)


def make_schedule(beta_min: float, beta_max: float, steps: int,
                  kind: str = "linear") -> NoiseSchedule:
    """Linear variance schedule with variance-preserving cumulative terms."""
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise ConfigError(f"schedule bounds out of range: [{beta_min}, {beta_max}]")
    if steps < 2:
        raise ConfigError("schedule needs at least 2 steps")

    beta = np.zeros(steps + 1)
    beta[1:] = np.linspace(beta_min, beta_max, steps)
    alpha = np.ones(steps + 1)
    alpha[1:] = np.sqrt(1.0 - beta[1:])
    alpha_bar = np.cumprod(alpha)
    beta_bar = np.sqrt(1.0 - alpha_bar ** 2)
    posterior_var = np.zeros(steps + 1)
    # var(x_{n-1} | x_n, x_0) = beta_n * beta_bar_{n-1}^2 / beta_bar_n^2
    posterior_var[1:] = beta[1:] * (beta_bar[:-1] ** 2) / (beta_bar[1:] ** 2)
    kappa = np.ones(steps + 1)
    return NoiseSchedule(steps=steps, beta=beta, alpha=alpha, alpha_bar=alpha_bar,
                         beta_bar=beta_bar, posterior_var=posterior_var, kappa=kappa)


def _check_step(n: int, sched: NoiseSchedule):
    if not 1 <= n <= sched.steps:
        raise ContractViolation(f"step {n} outside 1..{sched.steps}")


def q_sample(x0: Array, n: int, eps: Array, sched: NoiseSchedule) -> Array:
    """Corrupt clean data to step n: alpha_bar_n * x0 + beta_bar_n * eps."""
    _check_step(n, sched)
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ContractViolation(f"noise shape {eps.shape} != data shape {x0.shape}")
    return sched.alpha_bar[n] * x0 + sched.beta_bar[n] * eps


def _as_array(pred) -> Array:
    return pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)


def diffusion_loss(model, x0_batch, cond_a_batch, cond_t_batch,
                   sched: NoiseSchedule, rng: np.random.Generator) -> float:
    """Noise-matching loss, averaged over a batch of clean sequences.

    Per sample: draw n uniform on 1..steps and eps ~ N(0, I), corrupt, and
    score kappa_n * ||eps - model(x_n, n, ...)||^2 (sum over all elements).
    """
    if isinstance(x0_batch, np.ndarray) and x0_batch.ndim == 2:
        x0_batch = [x0_batch]
        cond_a_batch = [cond_a_batch]
        cond_t_batch = [cond_t_batch]
    total = 0.0
    for x0, ca, ct in zip(x0_batch, cond_a_batch, cond_t_batch):
        x0 = np.asarray(x0, dtype=np.float64)
        n = int(rng.integers(1, sched.steps + 1))
        eps = rng.standard_normal(x0.shape)
        x_n = q_sample(x0, n, eps, sched)
        eps_hat = _as_array(model(x_n, n, ca, ct))
        total += sched.kappa[n] * float(((eps - eps_hat) ** 2).sum())
    return total / len(x0_batch)


@dataclass(frozen=True)
class GuidanceConfig:
    """Strengths of the audio and text conditions plus training-time dropout."""

    gamma: float = 1.0
    delta: float = 1.0
    condition_dropout_prob: float = 0.1

    def __post_init__(self):
        if self.gamma < 0 or self.delta < 0:
            raise ConfigError("guidance scales must be non-negative")
        if not 0.0 <= self.condition_dropout_prob < 1.0:
            raise ConfigError("condition dropout probability must be in [0, 1)")


def guided_noise_estimate(model, x_n: Array, n: int, cond_a, cond_t,
                          g: GuidanceConfig, **model_kw):
    """Compose eps(null) + gamma*(eps(a) - eps(null)) + delta*(eps(a,t) - eps(a)).

    Exact algebraic shortcuts avoid redundant model calls (e.g. gamma=delta=1
    collapses to the fully conditioned estimate).  Returns the composed
    estimate and the raw return value of the most-conditioned call, so callers
    can recover captured state from it.
    """
    gam, del_ = g.gamma, g.delta
    if gam == 0.0 and del_ == 0.0:
        top = model(x_n, n, None, None, **model_kw)
        return _strip(top), top
    if del_ == 0.0:
        if gam == 1.0:
            top = model(x_n, n, cond_a, None, **model_kw)
            return _strip(top), top
        e_null = _strip(model(x_n, n, None, None))
        top = model(x_n, n, cond_a, None, **model_kw)
        return e_null + gam * (_strip(top) - e_null), top
    if gam == 1.0 and del_ == 1.0:
        top = model(x_n, n, cond_a, cond_t, **model_kw)
        return _strip(top), top
    e_null = _strip(model(x_n, n, None, None))
    e_a = _strip(model(x_n, n, cond_a, None))
    top = model(x_n, n, cond_a, cond_t, **model_kw)
    e_at = _strip(top)
    return e_null + gam * (e_a - e_null) + del_ * (e_at - e_a), top


def _strip(pred) -> Array:
    if isinstance(pred, tuple):
        pred = pred[0]
    return _as_array(pred)


def guided_reverse_step(model, x_n: Array, n: int, cond_a, cond_t,
                        g: GuidanceConfig, sched: NoiseSchedule,
                        rng: np.random.Generator, clip_x0: float | None = None,
                        **model_kw):
    """One reverse transition x_n -> x_{n-1} under the guided noise estimate.

    The posterior mean is computed through the implied clean sample,
    x0_hat = (x_n - beta_bar_n * eps) / alpha_bar_n, which equals the familiar
    (x_n - beta_n / beta_bar_n * eps) / alpha_n form exactly.  ``clip_x0``
    optionally clamps x0_hat to [-clip_x0, clip_x0] first: with aggressive
    variance schedules the unclamped update amplifies prediction error by
    1/alpha_n per step, and clamping to the data range is the standard guard.
    Scheduled Gaussian noise is added except at n=1, where the posterior
    variance is zero.  Returns (x_prev, top_call_result).
    """
    _check_step(n, sched)
    x_n = np.asarray(x_n, dtype=np.float64)
    eps_star, top = guided_noise_estimate(model, x_n, n, cond_a, cond_t, g, **model_kw)
    x0_hat = (x_n - sched.beta_bar[n] * eps_star) / sched.alpha_bar[n]
    if clip_x0 is not None:
        x0_hat = np.clip(x0_hat, -clip_x0, clip_x0)
    bb2 = sched.beta_bar[n] ** 2
    coef_x0 = sched.alpha_bar[n - 1] * sched.beta[n] / bb2
    coef_xn = sched.alpha[n] * (sched.beta_bar[n - 1] ** 2) / bb2
    mean = coef_x0 * x0_hat + coef_xn * x_n
    if n > 1:
        mean = mean + math.sqrt(sched.posterior_var[n]) * rng.standard_normal(x_n.shape)
    return mean, top


def sample(model, length: int, cond_a, cond_t, g: GuidanceConfig,
           sched: NoiseSchedule, seed, *, clip_x0: float | None = None,
           memory=None, capture_memory: bool = False,
           capture_tail: int | None = None):
    """Full reverse loop from prior noise; deterministic given the seed.

    With ``capture_memory`` the fully-conditioned model call at the final step
    is asked for its per-block latent tails, and the result is returned as
    ``(motion, captured)``.
    """
    t_cap = getattr(model, "t_seq", None)
    if t_cap is not None and length > t_cap:
        raise ContractViolation(f"length {length} exceeds segment capacity {t_cap}")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((length, model.pose_dim))
    captured = None
    for n in range(sched.steps, 0, -1):
        want = capture_memory and n == 1
        kw = dict(memory=memory)
        if want:
            kw["capture_memory"] = True
            kw["capture_tail"] = capture_tail
        x, top = guided_reverse_step(model, x, n, cond_a, cond_t, g, sched, rng,
                                     clip_x0=clip_x0, **kw)
        if want and isinstance(top, tuple):
            captured = top[1]
    if capture_memory:
        return x, captured
    return x
