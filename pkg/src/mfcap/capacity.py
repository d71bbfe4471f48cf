"""Information capacity of Gaussian parameter-noise channels.

Two channels are covered:

* fixed noise variance, where ``theta ~ N(0, prior_var)`` is observed as
  ``theta + N(0, noise_var)`` and the capacity has the closed form
  ``0.5 * log(1 + prior_var / noise_var)`` per dimension;
* learned noise variance under the beta-scaled objective, where
  ``theta ~ N(0, 1/beta)``, ``noise_var ~ Gamma(beta/2 + 1, rate=beta/2)``
  and the capacity needs a nested integral over the Gamma mixture.

The learned-variance path assumes unit prior variance. For another prior
variance, divide the parameters by the prior standard deviation first; the
mutual information is invariant under that rescaling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special_math import (
    QuadratureSpec,
    Rng,
    digamma,
    integrate_adaptive,
    log_gamma,
    sample_gamma,
    sample_standard_normal,
)

LN2 = math.log(2.0)
_HALF_LOG_2PIE = 0.5 * math.log(2.0 * math.pi * math.e)


class NegativeCapacityError(ArithmeticError):
    pass


@dataclass(frozen=True)
class ChannelSpec:
    prior_variance: float
    noise_variance: float
    dim_count: int = 1

    def __post_init__(self):
        if not self.prior_variance > 0:
            raise ValueError(f"prior_variance must be > 0, got {self.prior_variance}")
        if not self.noise_variance > 0:
            raise ValueError(f"noise_variance must be > 0, got {self.noise_variance}")
        if self.dim_count < 1:
            raise ValueError(f"dim_count must be >= 1, got {self.dim_count}")


@dataclass(frozen=True)
class BetaChannelSpec:
    beta: float
    dim_count: int = 1

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.dim_count < 1:
            raise ValueError(f"dim_count must be >= 1, got {self.dim_count}")

    @property
    def gamma_shape(self) -> float:
        return self.beta / 2.0 + 1.0

    @property
    def gamma_rate(self) -> float:
        return self.beta / 2.0


@dataclass(frozen=True)
class CapacityReport:
    per_dim_bits: float
    per_dim_nats: float
    total_bits: float
    source: ChannelSpec | BetaChannelSpec
    quadrature_err: float | None = None

    @classmethod
    def from_nats(cls, nats, source, quadrature_err=None):
        bits = nats / LN2
        return cls(bits, nats, bits * source.dim_count, source, quadrature_err)


def fixed_variance_capacity(spec: ChannelSpec) -> CapacityReport:
    nats = 0.5 * math.log1p(spec.prior_variance / spec.noise_variance)
    return CapacityReport.from_nats(nats, spec)


def solve_noise_for_capacity(target_bits_per_dim: float, prior_variance: float) -> float:
    """Noise variance that gives ``target_bits_per_dim`` at the given prior variance."""
    if not target_bits_per_dim > 0:
        raise ValueError(f"target capacity must be > 0 bits, got {target_bits_per_dim}")
    if not prior_variance > 0:
        raise ValueError(f"prior_variance must be > 0, got {prior_variance}")
    try:
        snr = math.expm1(2.0 * target_bits_per_dim * LN2)
    except OverflowError:
        raise OverflowError(
            f"target of {target_bits_per_dim} bits overflows the signal-to-noise ratio"
        ) from None
    noise = prior_variance / snr
    if not noise > 0:
        raise OverflowError(f"target of {target_bits_per_dim} bits underflows the noise variance")
    return noise


# --- learned-variance channel -------------------------------------------------

def _log_noise_var_window(spec: BetaChannelSpec, sigmas: float):
    """Integration window in s = log(noise_var) holding all but ~exp(-sigmas**2/2)
    of the Gamma mass, plus the mode of the Gamma weight in s."""
    k, lam = spec.gamma_shape, spec.gamma_rate
    budget = 0.5 * sigmas * sigmas
    s_mode = math.log(k / lam)
    # left tail of the weight decays like exp(k * s)
    s_lo = s_mode - budget / k
    # right tail: lam*x - k*log(x) exceeds its minimum by `budget`
    floor = k - k * math.log(k / lam)
    x = 4.0 * k / lam
    for _ in range(100):
        x_new = (budget + floor + k * math.log(x)) / lam
        if abs(x_new - x) <= 1e-12 * x:
            break
        x = x_new
    return s_lo, math.log(x_new), s_mode


def _log_gamma_weight(s: np.ndarray, spec: BetaChannelSpec) -> np.ndarray:
    """log of Gamma(noise_var) density times the Jacobian d(noise_var)/ds."""
    k, lam = spec.gamma_shape, spec.gamma_rate
    return k * math.log(lam) - log_gamma(k) + k * s - lam * np.exp(s)


def _mixture_integrand(theta: np.ndarray, spec: BetaChannelSpec):
    theta_sq = np.asarray(theta, dtype=np.float64)[:, None] ** 2
    inv_beta = 1.0 / spec.beta

    def integrand(s):
        var = np.exp(s) + inv_beta
        log_normal = -0.5 * np.log(2.0 * math.pi * var) - 0.5 * theta_sq / var
        return np.exp(_log_gamma_weight(s, spec) + log_normal)

    return integrand


def gamma_mixture_marginal_density(theta, beta: float, spec: QuadratureSpec | None = None):
    """Density of the noisy parameter after integrating out the Gamma noise variance.

    ``theta`` may be a scalar or an array; the inner integral runs over
    log noise variance and is evaluated for all points at once.
    """
    return _marginal_density_with_err(theta, BetaChannelSpec(beta), spec)[0]


def _marginal_density_with_err(theta, bspec: BetaChannelSpec, spec: QuadratureSpec | None):
    spec = spec or QuadratureSpec()
    scalar = np.ndim(theta) == 0
    pts = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    s_lo, s_hi, s_mode = _log_noise_var_window(bspec, spec.tail_cutoff_sigmas)
    value, err = integrate_adaptive(
        _mixture_integrand(pts, bspec), s_lo, s_hi, spec, breakpoints=(s_mode,)
    )
    value = np.atleast_1d(value)
    return (float(value[0]) if scalar else value), err


def marginal_std(beta: float) -> float:
    """Standard deviation of the noisy parameter: E[noise_var] + 1/beta = 1 + 3/beta."""
    return math.sqrt(1.0 + 3.0 / beta)


def conditional_entropy_closed_form(beta: float) -> float:
    """E[0.5 * log(2*pi*e*noise_var)] in nats, via E[log X] = psi(k) - log(rate)."""
    b = BetaChannelSpec(beta)
    return _HALF_LOG_2PIE + 0.5 * (digamma(b.gamma_shape) - math.log(b.gamma_rate))


def conditional_entropy_quadrature(beta: float, spec: QuadratureSpec | None = None):
    spec = spec or QuadratureSpec()
    b = BetaChannelSpec(beta)
    s_lo, s_hi, s_mode = _log_noise_var_window(b, spec.tail_cutoff_sigmas)

    def integrand(s):
        return np.exp(_log_gamma_weight(s, b)) * (_HALF_LOG_2PIE + 0.5 * s)

    return integrate_adaptive(integrand, s_lo, s_hi, spec, breakpoints=(s_mode,))


def marginal_entropy(beta: float, spec: QuadratureSpec | None = None):
    """Differential entropy (nats) of the noisy parameter, with error estimate."""
    spec = spec or QuadratureSpec()
    b = BetaChannelSpec(beta)
    inner_err = [0.0]

    def neg_p_log_p(t):
        p, err = _marginal_density_with_err(t, b, spec)
        inner_err[0] = max(inner_err[0], err)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(p > 0, -p * np.log(p), 0.0)

    sd = marginal_std(beta)
    # the density is even: integrate the right half and double
    half, err = integrate_adaptive(
        neg_p_log_p, 0.0, math.inf, spec, scale=sd, breakpoints=(sd, 3 * sd)
    )
    return 2.0 * half, 2.0 * err + inner_err[0]


def learned_variance_capacity(spec: BetaChannelSpec, quad: QuadratureSpec | None = None) -> CapacityReport:
    quad = quad or QuadratureSpec()
    h_marginal, h_err = marginal_entropy(spec.beta, quad)
    h_cond = conditional_entropy_closed_form(spec.beta)
    h_cond_quad, c_err = conditional_entropy_quadrature(spec.beta, quad)
    if abs(h_cond - h_cond_quad) > 1e-6:
        raise ArithmeticError(
            f"conditional entropy paths disagree at beta={spec.beta}: "
            f"closed form {h_cond!r} vs quadrature {h_cond_quad!r}"
        )
    nats = h_marginal - h_cond
    if nats < -1e-6:
        raise NegativeCapacityError(f"capacity {nats} nats < 0 at beta={spec.beta}; quadrature failed")
    nats = max(nats, 0.0)
    return CapacityReport.from_nats(nats, spec, quadrature_err=(h_err + c_err) / LN2)


def beta_capacity_table(betas, quad: QuadratureSpec | None = None):
    betas = [float(b) for b in betas]
    if not betas:
        raise ValueError("beta list is empty")
    rows = [(b, learned_variance_capacity(BetaChannelSpec(b), quad)) for b in betas]
    ordered = sorted(rows, key=lambda r: r[0])
    for (b0, r0), (b1, r1) in zip(ordered, ordered[1:]):
        if b1 > b0 and r1.per_dim_bits > r0.per_dim_bits:
            raise ArithmeticError(
                f"capacity increased from {r0.per_dim_bits} to {r1.per_dim_bits} bits "
                f"between beta={b0} and beta={b1}"
            )
    return rows


# --- Monte Carlo oracle -------------------------------------------------------

def _trapezoid_marginal(theta: np.ndarray, bspec: BetaChannelSpec, nodes: int = 256, chunk: int = 8192):
    """Marginal density by the trapezoid rule on an even grid in log noise variance.

    The integrand is smooth and decays exponentially at both ends in that
    variable, so the plain trapezoid rule converges geometrically; it shares
    no code with the adaptive path.
    """
    s_lo, s_hi, _ = _log_noise_var_window(bspec, 12.0)
    s = np.linspace(s_lo, s_hi, nodes)
    h = s[1] - s[0]
    w = np.full(nodes, h)
    w[0] = w[-1] = 0.5 * h
    log_w = _log_gamma_weight(s, bspec) + np.log(w)
    var = np.exp(s) + 1.0 / bspec.beta
    out = np.empty(len(theta))
    for i in range(0, len(theta), chunk):
        t2 = theta[i:i + chunk, None] ** 2
        out[i:i + chunk] = np.exp(log_w - 0.5 * np.log(2.0 * math.pi * var) - 0.5 * t2 / var).sum(axis=1)
    return out


def mc_capacity_estimate(spec: ChannelSpec | BetaChannelSpec, n_samples: int, rng: Rng):
    """Monte Carlo capacity estimate in bits per dimension.

    Samples the generative chain prior -> noisy parameter, averages the
    negative log marginal density and subtracts the analytic conditional
    entropy. Returns ``(bits, standard_error_bits)``.
    """
    if n_samples < 10_000:
        raise ValueError(f"n_samples must be >= 1e4, got {n_samples}")
    if isinstance(spec, ChannelSpec):
        theta = math.sqrt(spec.prior_variance) * sample_standard_normal(rng, n_samples)
        noisy = theta + math.sqrt(spec.noise_variance) * sample_standard_normal(rng, n_samples)
        total_var = spec.prior_variance + spec.noise_variance
        neg_log_p = 0.5 * math.log(2.0 * math.pi * total_var) + 0.5 * noisy**2 / total_var
        h_cond = 0.5 * math.log(2.0 * math.pi * math.e * spec.noise_variance)
    else:
        noise_var = sample_gamma(rng, spec.gamma_shape, spec.gamma_rate, n_samples)
        theta = sample_standard_normal(rng, n_samples) / math.sqrt(spec.beta)
        noisy = theta + np.sqrt(noise_var) * sample_standard_normal(rng, n_samples)
        neg_log_p = -np.log(_trapezoid_marginal(noisy, spec))
        h_cond = conditional_entropy_closed_form(spec.beta)
    nats = float(np.mean(neg_log_p)) - h_cond
    se = float(np.std(neg_log_p, ddof=1)) / math.sqrt(n_samples)
    return nats / LN2, se / LN2
