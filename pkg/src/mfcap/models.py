"""MLP classifier and VAE whose every weight is a mean-field parameter block."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .capacity import BetaChannelSpec, learned_variance_capacity, solve_noise_for_capacity
from .mean_field import (
    DEFAULT_INIT_LOG_VARIANCE,
    FixedNoise,
    GaussianPrior,
    ImproperUniformPrior,
    LearnedNoise,
    ObjectiveValue,
    VariationalParam,
    assemble_objective,
    noisy_model_objective,
    sample_noisy_params,
)
from .special_math import Rng

KINDS = ("classifier", "vae")
LIKELIHOODS = ("categorical", "bernoulli", "gaussian")
NOISE_MODES = ("fixed", "learned")
PRIORS = ("gaussian", "improper")


@dataclass(frozen=True)
class ModelSpec:
    """Declarative model description.

    For a classifier ``layer_widths`` runs input -> classes. For a VAE it is
    the decoder, latent -> data; the encoder mirrors it with a final layer
    of width ``2 * latent_dim`` (means, then log-variances).

    ``capacity_bits`` sets the fixed noise variance through the channel
    capacity at ``prior_variance``; ``math.inf`` means noiseless.
    ``noise_variance`` overrides it when given.
    """
    kind: str
    layer_widths: tuple[int, ...]
    likelihood: str
    latent_dim: int = 2
    noise_mode: str = "fixed"
    prior: str = "gaussian"
    prior_variance: float = 1.0
    capacity_bits: float | None = None
    noise_variance: float | None = None
    beta: float = 1.0
    init_log_variance: float = DEFAULT_INIT_LOG_VARIANCE
    obs_variance: float = 0.1

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}, got {self.likelihood!r}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}, got {self.noise_mode!r}")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")
        if len(self.layer_widths) < 2 or any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer_widths must list >= 2 positive widths, got {self.layer_widths}")
        if self.kind == "vae":
            if self.latent_dim < 1:
                raise ValueError(f"vae needs latent_dim >= 1, got {self.latent_dim}")
            if self.layer_widths[0] != self.latent_dim:
                raise ValueError(
                    f"vae decoder must start at latent_dim={self.latent_dim}, got {self.layer_widths}"
                )
            if self.likelihood == "categorical":
                raise ValueError("vae likelihood must be bernoulli or gaussian")
        elif self.likelihood != "categorical":
            raise ValueError("classifier likelihood must be categorical")
        if self.noise_mode == "fixed":
            if self.capacity_bits is None and self.noise_variance is None:
                raise ValueError("fixed noise needs capacity_bits or noise_variance")
            if self.capacity_bits is not None and not self.capacity_bits > 0:
                raise ValueError(f"capacity_bits must be > 0, got {self.capacity_bits}")
        if not self.prior_variance > 0:
            raise ValueError(f"prior_variance must be > 0, got {self.prior_variance}")
        if not self.beta > 0:
            raise ValueError(f"beta must be > 0, got {self.beta}")

    def resolved_noise_variance(self) -> float:
        if self.noise_variance is not None:
            return float(self.noise_variance)
        if math.isinf(self.capacity_bits):
            return 0.0
        return solve_noise_for_capacity(self.capacity_bits, self.prior_variance)

    def bits_per_param(self) -> float:
        """Capacity bound per parameter; inf for noiseless or improper-prior models."""
        if self.prior == "improper":
            return math.inf
        if self.noise_mode == "learned":
            return learned_variance_capacity(BetaChannelSpec(self.beta)).per_dim_bits
        var = self.resolved_noise_variance()
        if var == 0.0:
            return math.inf
        return 0.5 * math.log2(1.0 + self.prior_variance / var)

    def encoder_widths(self) -> tuple[int, ...]:
        rev = self.layer_widths[::-1]
        return rev[:-1] + (2 * self.latent_dim,)

    def to_dict(self) -> dict:
        return asdict(self)


class Model:
    def __init__(self, spec: ModelSpec, params: list[VariationalParam]):
        self.spec = spec
        self.params = params
        n_dec = len(spec.layer_widths) - 1
        if spec.kind == "vae":
            n_enc = 2 * n_dec
            self.encoder = params[:n_enc]
            self.decoder = params[n_enc:]
        else:
            self.encoder = []
            self.decoder = params

    @property
    def parameter_count(self) -> int:
        return sum(p.size for p in self.params)

    def trainables(self) -> list[Tensor]:
        return [t for p in self.params for t in p.trainables()]

    def mean_weights(self) -> list[Tensor]:
        return [ad.scale(p.mean, 1.0) for p in self.params]

    def sample_weights(self, rng: Rng) -> list[Tensor]:
        return [sample_noisy_params(p, rng) for p in self.params]


def _layer_params(widths, spec: ModelSpec, rng: Rng, prefix: str):
    if spec.prior == "gaussian":
        prior = GaussianPrior(spec.prior_variance)
    else:
        prior = ImproperUniformPrior()
    fixed_var = spec.resolved_noise_variance() if spec.noise_mode == "fixed" else None
    out = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        bound = 1.0 / math.sqrt(fan_in)
        for name, shape in ((f"{prefix}{i}.W", (fan_in, fan_out)), (f"{prefix}{i}.b", (fan_out,))):
            mean = Tensor(rng.uniform(math.prod(shape)).reshape(shape) * (2 * bound) - bound)
            if fixed_var is None:
                noise = LearnedNoise(Tensor(np.full(shape, spec.init_log_variance), requires_grad=True))
            else:
                noise = FixedNoise(fixed_var)
            out.append(VariationalParam(mean, noise, prior, name))
    return out


def build_model(spec: ModelSpec, rng: Rng) -> Model:
    params = []
    if spec.kind == "vae":
        params += _layer_params(spec.encoder_widths(), spec, rng, "enc")
        params += _layer_params(spec.layer_widths, spec, rng, "dec")
    else:
        params += _layer_params(spec.layer_widths, spec, rng, "fc")
    return Model(spec, params)


def mlp_forward(weights: list[Tensor], x) -> Tensor:
    """Alternating (W, b) pairs, ReLU between layers, linear output."""
    h = x if isinstance(x, Tensor) else Tensor(x)
    n_layers = len(weights) // 2
    for i in range(n_layers):
        h = ad.bias_add(ad.matmul(h, weights[2 * i]), weights[2 * i + 1])
        if i < n_layers - 1:
            h = ad.relu(h)
    return h


# --- classifier ---------------------------------------------------------------

def classifier_log_likelihood(weights, x, labels) -> Tensor:
    """Mean log p(label | x) over the batch."""
    return ad.scale(ad.softmax_cross_entropy(mlp_forward(weights, x), labels), -1.0)


def classifier_loss(model: Model, batch, rng: Rng, n_train: int, n_noise_samples: int = 1) -> ObjectiveValue:
    """Per-datapoint objective: mean log-likelihood + regularizer / n_train."""
    x, y = batch
    _require(model, "classifier")
    return assemble_objective(
        lambda w: classifier_log_likelihood(w, x, y),
        model.params, model.spec.beta, n_noise_samples, rng, reg_scale=1.0 / n_train,
    )


# --- VAE ------------------------------------------------------------------------

@dataclass
class VaeOutput:
    latent_mean: np.ndarray
    latent_log_variance: np.ndarray
    recon_params: np.ndarray
    recon_log_likelihood: np.ndarray  # per datapoint
    latent_kl: np.ndarray  # per datapoint, >= 0


def _split(model: Model, weights):
    n = len(model.encoder)
    return weights[:n], weights[n:]


def vae_elbo_terms(model: Model, weights, x, latent_eps):
    """Per-datapoint reconstruction log-likelihood and analytic latent KL tensors."""
    enc_w, dec_w = _split(model, weights)
    d = model.spec.latent_dim
    h = mlp_forward(enc_w, x)
    z_mean = ad.slice_cols(h, 0, d)
    z_logvar = ad.slice_cols(h, d, 2 * d)
    z = ad.add(z_mean, ad.mul(ad.exp(ad.scale(z_logvar, 0.5)), Tensor(latent_eps)))
    out = mlp_forward(dec_w, z)
    recon = _recon_log_likelihood(model, x, out)
    kl_terms = ad.sub(ad.add(ad.exp(z_logvar), ad.square(z_mean)), ad.shift(z_logvar, 1.0))
    kl = ad.scale(ad.sum(kl_terms, axis=1), 0.5)
    return recon, kl, (z_mean, z_logvar, out)


def _recon_log_likelihood(model: Model, x, out: Tensor) -> Tensor:
    if model.spec.likelihood == "bernoulli":
        return ad.bernoulli_log_likelihood(x, out, axis=1)
    return ad.gaussian_log_likelihood(x, out, model.spec.obs_variance, axis=1)


def _check_binary(model: Model, x):
    if model.spec.likelihood == "bernoulli" and not np.all((x == 0.0) | (x == 1.0)):
        raise ValueError("bernoulli likelihood needs binarized data")


def vae_loss(model: Model, batch, rng: Rng, n_train: int, n_noise_samples: int = 1):
    """Sum of per-datapoint ELBOs + (batch_size / n_train) * parameter regularizer.

    Returns ``(ObjectiveValue, VaeOutput)``; the output describes the last
    noise draw.
    """
    _require(model, "vae")
    x = batch[0] if isinstance(batch, tuple) else batch
    _check_binary(model, x)
    holder = {}

    def likelihood(weights):
        eps = rng.normal((x.shape[0], model.spec.latent_dim))
        recon, kl, extras = vae_elbo_terms(model, weights, x, eps)
        holder["out"] = (recon, kl, extras)
        return ad.sum(ad.sub(recon, kl))

    value = assemble_objective(
        likelihood, model.params, model.spec.beta, n_noise_samples, rng,
        reg_scale=x.shape[0] / n_train,
    )
    recon, kl, (z_mean, z_logvar, out) = holder["out"]
    return value, VaeOutput(z_mean.data, z_logvar.data, out.data, recon.data, kl.data)


def vae_noisy_model_objective(model: Model, batch, rng: Rng, n_train: int, n_noise_samples: int = 1):
    """Same objective as :func:`vae_loss` computed as a noisy-model point estimate."""
    x = batch[0] if isinstance(batch, tuple) else batch
    _check_binary(model, x)
    if any(p.learned for p in model.params):
        raise ValueError("noisy-model path covers fixed-variance models only")

    def likelihood(weights):
        eps = rng.normal((x.shape[0], model.spec.latent_dim))
        recon, kl, _ = vae_elbo_terms(model, weights, x, eps)
        return ad.sum(ad.sub(recon, kl))

    return noisy_model_objective(
        likelihood,
        [p.mean.data for p in model.params],
        [p.noise.variance for p in model.params],
        [p.prior.variance if isinstance(p.prior, GaussianPrior) else None for p in model.params],
        n_noise_samples, rng, reg_scale=x.shape[0] / n_train,
    )


def reconstruct_means(model: Model, batch, rng: Rng, n_noise_samples: int = 8) -> np.ndarray:
    """Pixel means sigmoid(decoder(latent mean)) averaged over parameter noise."""
    _require(model, "vae")
    x = batch[0] if isinstance(batch, tuple) else batch
    d = model.spec.latent_dim
    acc = np.zeros(x.shape)
    for _ in range(n_noise_samples):
        enc_w, dec_w = _split(model, model.sample_weights(rng))
        z_mean = ad.slice_cols(mlp_forward(enc_w, x), 0, d)
        out = mlp_forward(dec_w, z_mean).data
        acc += ad._sigmoid(out) if model.spec.likelihood == "bernoulli" else np.clip(out, 0.0, 1.0)
    return acc / n_noise_samples


def _require(model: Model, kind: str):
    if model.spec.kind != kind:
        raise ValueError(f"operation needs a {kind} model, got {model.spec.kind}")
