"""Random configurations for the dual-path objective identity."""
import numpy as np

from mfcap import autodiff as ad
from mfcap.autodiff import Tensor
from mfcap.mean_field import (
    FixedNoise,
    GaussianPrior,
    ImproperUniformPrior,
    VariationalParam,
    assemble_objective,
    noisy_model_objective,
)
from mfcap.models import ModelSpec, build_model, vae_loss, vae_noisy_model_objective
from mfcap.special_math import Rng


def _regression_pair(g):
    n, d, k = (int(v) for v in g.integers(1, 6, size=3))
    x, y = g.normal(size=(n, d)), g.normal(size=(n, k))
    obs_var = float(g.uniform(0.1, 2.0))
    noise_var = 0.0 if g.uniform() < 0.2 else float(g.uniform(1e-4, 3.0))
    prior_var = None if g.uniform() < 0.3 else float(g.uniform(0.1, 5.0))
    prior = ImproperUniformPrior() if prior_var is None else GaussianPrior(prior_var)
    shapes = [(d, k), (k,)]
    thetas = [g.normal(size=s) for s in shapes]
    params = [VariationalParam(Tensor(t.copy()), FixedNoise(noise_var), prior, f"p{i}")
              for i, t in enumerate(thetas)]
    n_noise = int(g.integers(1, 4))
    reg_scale = float(g.choice([1.0, g.uniform(1e-3, 1.0)]))
    seed = int(g.integers(0, 2**63))

    def likelihood(w):
        return ad.gaussian_log_likelihood(Tensor(y), ad.bias_add(ad.matmul(Tensor(x), w[0]), w[1]), obs_var)

    a = assemble_objective(likelihood, params, 1.0, n_noise, Rng(seed), reg_scale)
    b = noisy_model_objective(likelihood, thetas, [noise_var] * 2, [prior_var] * 2, n_noise, Rng(seed), reg_scale)
    return a, b


def _vae_pair(g):
    seed = int(g.integers(0, 2**63))
    lik = ["bernoulli", "gaussian"][int(g.integers(0, 2))]
    prior = ["gaussian", "improper"][int(g.integers(0, 2))]
    spec = ModelSpec("vae", (2, 3, 6), lik, latent_dim=2, prior=prior,
                     capacity_bits=float(g.uniform(0.1, 8.0)))
    model = build_model(spec, Rng(seed))
    x = g.uniform(size=(4, 6))
    if lik == "bernoulli":
        x = (x < 0.5).astype(float)
    n_noise = int(g.integers(1, 3))
    a = vae_loss(model, x, Rng(seed, (1,)), 40, n_noise)[0]
    b = vae_noisy_model_objective(model, x, Rng(seed, (1,)), 40, n_noise)
    return a, b


def equivalence_pair(g):
    """``(assembled, noisy_model)`` objective values for one random configuration."""
    return _regression_pair(g) if g.uniform() < 0.5 else _vae_pair(g)
