"""Gaussian mean-field parameter blocks and training objectives.

A :class:`VariationalParam` holds a trainable mean plus either a fixed
noise variance or a trainable log-variance, and a Gaussian or improper
uniform prior. Objectives are expressed for *maximization*.

``noisy_model_objective`` computes the same fixed-variance objective a
second way, as a point estimate in a model whose likelihood sees
noise-corrupted parameters. It shares no code with ``assemble_objective``
beyond the likelihood callable, and the two agree bit-for-bit when they
consume the same random stream.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .special_math import Rng, log_gamma

DEFAULT_INIT_LOG_VARIANCE = math.log(0.01)


@dataclass(frozen=True)
class FixedNoise:
    """Constant noise variance; 0 means a noiseless point estimate."""
    variance: float

    def __post_init__(self):
        if not self.variance >= 0 or math.isinf(self.variance):
            raise ValueError(f"fixed noise variance must be finite and >= 0, got {self.variance}")


@dataclass
class LearnedNoise:
    log_variance: Tensor


@dataclass(frozen=True)
class GaussianPrior:
    variance: float = 1.0

    def __post_init__(self):
        if not self.variance > 0:
            raise ValueError(f"prior variance must be > 0, got {self.variance}")


@dataclass(frozen=True)
class ImproperUniformPrior:
    pass


class ModeError(ValueError):
    pass


class VariationalParam:
    def __init__(self, mean: Tensor, noise, prior, name: str = ""):
        if not isinstance(noise, (FixedNoise, LearnedNoise)):
            raise TypeError(f"unknown noise mode {noise!r}")
        if not isinstance(prior, (GaussianPrior, ImproperUniformPrior)):
            raise TypeError(f"unknown prior {prior!r}")
        if isinstance(noise, LearnedNoise) and noise.log_variance.shape != mean.shape:
            raise ad.ShapeError(
                f"log-variance shape {noise.log_variance.shape} != mean shape {mean.shape}"
            )
        mean.requires_grad = True
        self.mean = mean
        self.noise = noise
        self.prior = prior
        self.name = name

    @property
    def learned(self) -> bool:
        return isinstance(self.noise, LearnedNoise)

    @property
    def size(self) -> int:
        return self.mean.size

    @property
    def variance(self) -> np.ndarray:
        if self.learned:
            return np.exp(self.noise.log_variance.data)
        return np.full(self.mean.shape, self.noise.variance)

    def trainables(self) -> list[Tensor]:
        if self.learned:
            return [self.mean, self.noise.log_variance]
        return [self.mean]

    def __repr__(self):
        return f"VariationalParam({self.name!r}, shape={self.mean.shape}, noise={self.noise}, prior={self.prior})"


@dataclass
class ObjectiveValue:
    expected_log_likelihood: float
    regularizer: float
    total: float
    n_noise_samples: int
    objective: Tensor | None = None  # differentiable total, when recorded
    loss: Tensor | None = None  # negated objective, for gradient descent


def sample_noisy_params(p: VariationalParam, rng: Rng) -> Tensor:
    """Reparameterized draw ``mean + std * eps``; gradients reach mean (and log-variance)."""
    if p.learned:
        eps = Tensor(rng.normal(p.mean.shape))
        std = ad.exp(ad.scale(p.noise.log_variance, 0.5))
        return ad.add(p.mean, ad.mul(std, eps))
    if p.noise.variance == 0.0:
        return ad.scale(p.mean, 1.0)
    eps = rng.normal(p.mean.shape)
    return ad.add(p.mean, Tensor(math.sqrt(p.noise.variance) * eps))


def fixed_variance_regularizer(p: VariationalParam) -> Tensor:
    """``-sum(mean**2) / (2 * prior_var)``; zero under the improper prior."""
    if p.learned:
        raise ModeError(f"{p.name or 'param'}: fixed-variance regularizer needs fixed noise")
    if isinstance(p.prior, ImproperUniformPrior):
        return Tensor(0.0)
    return ad.scale(ad.sum(ad.square(p.mean)), -0.5 / p.prior.variance)


def learned_variance_regularizer(p: VariationalParam, beta: float) -> Tensor:
    """``(beta/2) * sum(log var - var - mean**2 - 1)`` at unit prior variance."""
    if not p.learned:
        raise ModeError(f"{p.name or 'param'}: learned-variance regularizer needs learned noise")
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if isinstance(p.prior, ImproperUniformPrior):
        return Tensor(0.0)
    lv = p.noise.log_variance
    inner = ad.sub(ad.sub(lv, ad.exp(lv)), ad.square(p.mean))
    return ad.scale(ad.shift(ad.sum(inner), -float(p.size)), 0.5 * beta)


def gaussian_kl_to_standard(mean, log_variance) -> np.ndarray:
    """Elementwise KL(N(mean, exp(log_variance)) || N(0, 1))."""
    mean = np.asarray(mean, dtype=np.float64)
    lv = np.asarray(log_variance, dtype=np.float64)
    return 0.5 * (np.exp(lv) + mean * mean - 1.0 - lv)


def analytic_prior_logdensity_check(theta, noise_var, beta: float) -> float:
    """Log density of the noisy-model priors: theta ~ N(0, 1/beta), var ~ Gamma(beta/2+1, rate beta/2)."""
    theta = np.asarray(theta, dtype=np.float64)
    noise_var = np.asarray(noise_var, dtype=np.float64)
    if not np.all(noise_var > 0):
        raise ValueError("noise variances must be > 0")
    if not beta > 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    k, lam = beta / 2.0 + 1.0, beta / 2.0
    log_normal = 0.5 * math.log(beta / (2.0 * math.pi)) - 0.5 * beta * theta**2
    log_gam = k * math.log(lam) - log_gamma(k) + (k - 1.0) * np.log(noise_var) - lam * noise_var
    return float(np.sum(log_normal) + np.sum(log_gam))


def _check_modes(params: Sequence[VariationalParam]):
    kinds = {p.learned for p in params}
    if len(kinds) > 1:
        names = [p.name for p in params]
        raise ModeError(f"mixed fixed and learned noise modes across params {names}")


def regularizer(params: Sequence[VariationalParam], beta: float = 1.0) -> Tensor:
    _check_modes(params)
    terms = [
        learned_variance_regularizer(p, beta) if p.learned else fixed_variance_regularizer(p)
        for p in params
    ]
    total = terms[0]
    for t in terms[1:]:
        total = ad.add(total, t)
    return total


def assemble_objective(
    likelihood: Callable[[list[Tensor]], Tensor],
    params: Sequence[VariationalParam],
    beta: float,
    n_noise_samples: int,
    rng: Rng,
    reg_scale: float = 1.0,
) -> ObjectiveValue:
    """Monte Carlo estimate of ``E[log-likelihood] + reg_scale * regularizer``.

    Each of the ``n_noise_samples`` draws resamples every parameter block
    in order, then calls ``likelihood`` with the noisy tensors.
    """
    if n_noise_samples < 1:
        raise ValueError(f"n_noise_samples must be >= 1, got {n_noise_samples}")
    if not params:
        raise ValueError("no parameter blocks")
    _check_modes(params)
    ell = None
    for _ in range(n_noise_samples):
        draw = likelihood([sample_noisy_params(p, rng) for p in params])
        ell = draw if ell is None else ad.add(ell, draw)
    if n_noise_samples > 1:
        ell = ad.scale(ell, 1.0 / n_noise_samples)
    reg = regularizer(params, beta)
    if reg_scale != 1.0:
        reg = ad.scale(reg, reg_scale)
    total = ad.add(ell, reg)
    return ObjectiveValue(ell.item(), reg.item(), total.item(), n_noise_samples, total, ad.scale(total, -1.0))


def noisy_model_objective(
    likelihood: Callable[[list[Tensor]], Tensor],
    thetas: Sequence[np.ndarray],
    noise_variances: Sequence[float],
    prior_variances: Sequence[float | None],
    n_noise_samples: int,
    rng: Rng,
    reg_scale: float = 1.0,
) -> ObjectiveValue:
    """Lower bound on the log joint of the noise-injected model at point ``thetas``.

    Noise ``theta_tilde ~ N(theta, noise_var)`` feeds the likelihood; the
    prior term is ``log N(theta; 0, prior_var)`` up to a constant, with
    ``None`` standing for an improper flat prior.
    """
    loglik_sum = None
    for _ in range(n_noise_samples):
        noisy = []
        for theta, var in zip(thetas, noise_variances):
            theta = np.asarray(theta, dtype=np.float64)
            if var == 0.0:
                noisy.append(Tensor(theta * 1.0))
            else:
                noisy.append(Tensor(theta + math.sqrt(var) * rng.normal(theta.shape)))
        value = likelihood(noisy).item()
        loglik_sum = value if loglik_sum is None else loglik_sum + value
    expected = loglik_sum if n_noise_samples == 1 else loglik_sum * (1.0 / n_noise_samples)

    log_prior = None
    for theta, pvar in zip(thetas, prior_variances):
        theta = np.asarray(theta, dtype=np.float64)
        term = 0.0 if pvar is None else np.sum(theta * theta) * (-0.5 / pvar)
        log_prior = term if log_prior is None else log_prior + term
    log_prior = float(log_prior)
    if reg_scale != 1.0:
        log_prior = log_prior * reg_scale
    return ObjectiveValue(float(expected), log_prior, float(expected + log_prior), n_noise_samples)
