"""Optimizers, training loop, evaluation and capacity sweeps."""
from __future__ import annotations

import dataclasses
import hashlib
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .data import Dataset, batch_iter, binarize, load_idx_dataset, synthetic_blobs, take_first
from .models import (
    Model,
    ModelSpec,
    build_model,
    classifier_log_likelihood,
    classifier_loss,
    mlp_forward,
    vae_elbo_terms,
    vae_loss,
)
from .special_math import Rng

log = logging.getLogger(__name__)

AXES = {
    "capacity_bits": "capacity_bits",
    "dataset_size": "n_train",
    "depth": "depth",
    "beta": "beta",
    "prior_variance": "prior_variance",
}

METRIC_KEYS = (
    "train_ll", "test_ll",
    "train_elbo_noisy", "test_elbo_noisy",
    "train_elbo_mean", "test_elbo_mean",
    "accuracy",
)


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class DivergenceError(ArithmeticError):
    def __init__(self, epoch, value):
        super().__init__(f"objective became non-finite ({value}) at epoch {epoch}")
        self.epoch = epoch


# --- configuration ------------------------------------------------------------

def _parse_bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_float_list(text):
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    items = [t for t in str(text).replace(" ", "").split(",") if t]
    return tuple(float(v) for v in items)


def _optional_float(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return float(text)


def _optional_str(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return str(text).strip()


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str = "classifier"
    dataset: str = "blobs"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    n_train: int = 500
    n_test: int = 0
    binarize: bool | None = None
    threshold: float = 0.5
    blobs_classes: int = 3
    blobs_dim: int = 2
    blobs_separation: float = 4.0
    blobs_pool: int = 1000
    blobs_test: int = 300
    hidden_width: int = 128
    depth: int = 3
    latent_dim: int = 2
    likelihood: str | None = None
    obs_variance: float = 0.1
    noise_mode: str = "fixed"
    prior: str = "gaussian"
    prior_variance: float = 1.0
    capacity_bits: float = 2.0
    noise_variance: float | None = None
    beta: float = 1.0
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 100
    train_noise_samples: int = 1
    eval_noise_samples: int = 8
    eval_every: int = 1
    seed: int = 0
    sweep_axis: str | None = None
    sweep_values: tuple = ()
    repeats: int = 1
    save_models: bool = False

    def __post_init__(self):
        self._validate()

    @classmethod
    def from_mapping(cls, mapping: dict) -> "ExperimentConfig":
        names = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, raw in mapping.items():
            if key not in names:
                raise ConfigError(key, "unknown config key")
            try:
                kwargs[key] = _PARSE[key](raw) if isinstance(raw, str) or key in _LIST_KEYS else raw
            except (TypeError, ValueError) as exc:
                raise ConfigError(key, f"cannot parse {raw!r}: {exc}") from None
        return cls(**kwargs)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_mapping(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def to_text(self) -> str:
        lines = []
        for key, value in self.to_mapping().items():
            lines.append(f"{key} = {format_value(value)}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """64-bit content hash over every key except the seed."""
        body = "\n".join(
            f"{k} = {format_value(v)}" for k, v in sorted(self.to_mapping().items()) if k != "seed"
        )
        return hashlib.blake2b(body.encode(), digest_size=8).hexdigest()

    @property
    def resolved_likelihood(self) -> str:
        if self.likelihood:
            return self.likelihood
        return "categorical" if self.kind == "classifier" else "bernoulli"

    @property
    def resolved_binarize(self) -> bool:
        if self.binarize is not None:
            return self.binarize
        return self.kind == "vae" and self.resolved_likelihood == "bernoulli"

    def _validate(self):
        def need(key, ok, msg):
            if not ok:
                raise ConfigError(key, msg)

        need("kind", self.kind in ("classifier", "vae"), f"must be classifier or vae, got {self.kind!r}")
        need("dataset", self.dataset in ("blobs", "idx"), f"must be blobs or idx, got {self.dataset!r}")
        if self.dataset == "idx":
            need("train_images", bool(self.train_images), "required when dataset = idx")
            need("test_images", bool(self.test_images), "required when dataset = idx")
            if self.kind == "classifier":
                need("train_labels", bool(self.train_labels), "classifier needs labels")
                need("test_labels", bool(self.test_labels), "classifier needs labels")
        need("n_train", self.n_train >= 1, "must be >= 1")
        need("n_test", self.n_test >= 0, "must be >= 0")
        need("threshold", 0 < self.threshold < 1, "must lie in (0, 1)")
        need("blobs_classes", self.blobs_classes >= 2, "must be >= 2")
        need("blobs_dim", self.blobs_dim >= 2, "must be >= 2")
        need("hidden_width", self.hidden_width >= 1, "must be >= 1")
        need("depth", self.depth >= 1, "must be >= 1")
        need("latent_dim", self.latent_dim >= 1, "must be >= 1")
        need("likelihood", self.likelihood in (None, "categorical", "bernoulli", "gaussian"),
             f"unknown likelihood {self.likelihood!r}")
        need("obs_variance", self.obs_variance > 0, "must be > 0")
        need("noise_mode", self.noise_mode in ("fixed", "learned"), "must be fixed or learned")
        need("prior", self.prior in ("gaussian", "improper"), "must be gaussian or improper")
        need("prior_variance", self.prior_variance > 0, "must be > 0")
        need("capacity_bits", self.capacity_bits > 0, "must be > 0 (inf allowed)")
        need("noise_variance", self.noise_variance is None or self.noise_variance >= 0, "must be >= 0")
        need("beta", self.beta > 0, "must be > 0")
        need("optimizer", self.optimizer in ("adam", "sgd"), "must be adam or sgd")
        need("learning_rate", self.learning_rate >= 0, "must be >= 0")
        need("adam_beta1", 0 < self.adam_beta1 < 1, "must lie in (0, 1)")
        need("adam_beta2", 0 < self.adam_beta2 < 1, "must lie in (0, 1)")
        need("adam_eps", self.adam_eps > 0, "must be > 0")
        need("epochs", self.epochs >= 1, "must be >= 1")
        need("batch_size", self.batch_size >= 1, "must be >= 1")
        need("train_noise_samples", self.train_noise_samples >= 1, "must be >= 1")
        need("eval_noise_samples", self.eval_noise_samples >= 1, "must be >= 1")
        need("eval_every", self.eval_every >= 1, "must be >= 1")
        need("seed", 0 <= self.seed < 2**64, "must be a 64-bit unsigned integer")
        need("sweep_axis", self.sweep_axis in (None, *AXES), f"must be one of {sorted(AXES)}")
        need("repeats", self.repeats >= 1, "must be >= 1")
        if self.sweep_axis is not None:
            need("sweep_values", len(self.sweep_values) > 0, "must be non-empty when sweep_axis is set")


_PARSE = {
    "kind": str, "dataset": str,
    "train_images": _optional_str, "train_labels": _optional_str,
    "test_images": _optional_str, "test_labels": _optional_str,
    "n_train": int, "n_test": int,
    "binarize": lambda t: None if str(t).strip().lower() in ("", "none", "auto") else _parse_bool(t),
    "threshold": float,
    "blobs_classes": int, "blobs_dim": int, "blobs_separation": float, "blobs_pool": int, "blobs_test": int,
    "hidden_width": int, "depth": int, "latent_dim": int,
    "likelihood": _optional_str, "obs_variance": float,
    "noise_mode": str, "prior": str, "prior_variance": float,
    "capacity_bits": float, "noise_variance": _optional_float, "beta": float,
    "optimizer": str, "learning_rate": float, "adam_beta1": float, "adam_beta2": float, "adam_eps": float,
    "epochs": int, "batch_size": int,
    "train_noise_samples": int, "eval_noise_samples": int, "eval_every": int,
    "seed": int, "sweep_axis": _optional_str, "sweep_values": _parse_float_list,
    "repeats": int, "save_models": _parse_bool,
}
_LIST_KEYS = {"sweep_values"}


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(float(v)) for v in value)
    return str(value)


# --- data and model assembly ----------------------------------------------------

@lru_cache(maxsize=16)
def _load_idx_pair(images, labels):
    return load_idx_dataset(images, labels)


def load_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    """Training subset (first ``n_train`` items) and test split."""
    if cfg.dataset == "blobs":
        rng = Rng(cfg.seed, (0xDA7A,))
        per_class = -(-(cfg.blobs_pool + cfg.blobs_test) // cfg.blobs_classes)
        pool = synthetic_blobs(rng, per_class, cfg.blobs_classes, cfg.blobs_dim, cfg.blobs_separation)
        order = rng.permutation(len(pool))
        shuffled = dataclasses.replace(pool, images=pool.images[order], labels=pool.labels[order])
        test = dataclasses.replace(
            shuffled, images=shuffled.images[cfg.blobs_pool:cfg.blobs_pool + cfg.blobs_test],
            labels=shuffled.labels[cfg.blobs_pool:cfg.blobs_pool + cfg.blobs_test],
        )
        train = take_first(shuffled, min(cfg.blobs_pool, len(shuffled)))
    else:
        train = _load_idx_pair(cfg.train_images, cfg.train_labels if cfg.kind == "classifier" else None)
        test = _load_idx_pair(cfg.test_images, cfg.test_labels if cfg.kind == "classifier" else None)
    if cfg.n_train > len(train):
        raise ConfigError("n_train", f"{cfg.n_train} exceeds the {len(train)} available training items")
    train = take_first(train, cfg.n_train)
    if cfg.n_test:
        if cfg.n_test > len(test):
            raise ConfigError("n_test", f"{cfg.n_test} exceeds the {len(test)} available test items")
        test = take_first(test, cfg.n_test)
    if cfg.resolved_binarize:
        train, test = binarize(train, cfg.threshold), binarize(test, cfg.threshold)
    return train, test


def model_spec_for(cfg: ExperimentConfig, n_features: int, n_classes: int = 0) -> ModelSpec:
    """Infinite capacity means a noiseless model under the improper prior."""
    prior = cfg.prior
    if math.isinf(cfg.capacity_bits) and cfg.noise_mode == "fixed" and cfg.noise_variance is None:
        prior = "improper"
    hidden = [cfg.hidden_width] * (cfg.depth - 1)
    if cfg.kind == "classifier":
        widths = [n_features, *hidden, n_classes]
    else:
        widths = [cfg.latent_dim, *hidden, n_features]
    return ModelSpec(
        kind=cfg.kind,
        layer_widths=tuple(widths),
        likelihood=cfg.resolved_likelihood,
        latent_dim=cfg.latent_dim,
        noise_mode=cfg.noise_mode,
        prior=prior,
        prior_variance=cfg.prior_variance,
        capacity_bits=cfg.capacity_bits,
        noise_variance=cfg.noise_variance,
        beta=cfg.beta,
        obs_variance=cfg.obs_variance,
    )


def n_classes_of(*datasets: Dataset) -> int:
    return int(max(d.labels.max() for d in datasets if d.labels is not None and len(d))) + 1


# --- optimizers -----------------------------------------------------------------

@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 200
    batch_size: int = 100

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.kind!r}")
        if self.learning_rate < 0:
            raise ValueError("learning rate must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "OptimizerSpec":
        return cls(cfg.optimizer, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2,
                   cfg.adam_eps, cfg.epochs, cfg.batch_size)

    def build(self, params):
        if self.kind == "sgd":
            return SGD(params, self.learning_rate)
        return Adam(params, self.learning_rate, self.beta1, self.beta2, self.eps)


class SGD:
    def __init__(self, params, lr):
        self.params = list(params)
        self.lr = lr

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        for p in self.params:
            if p.grad is not None:
                p.data -= self.lr * p.grad


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- evaluation -------------------------------------------------------------------

def evaluate(model: Model, dataset: Dataset, rng: Rng, n_noise_samples: int = 8) -> dict:
    """Per-datapoint metrics under parameter noise ("noisy") and at the means.

    ``ll`` is the log-likelihood term (class log-probability, or the VAE
    reconstruction term); ``elbo`` subtracts the latent KL for a VAE and
    equals ``ll`` for a classifier. Neither includes the parameter prior.
    Does not modify the model.
    """
    mean_rng = rng.split()
    noise_rng = rng.split()
    x, y = dataset.images, dataset.labels
    with ad.no_grad():
        at_mean = _eval_pass(model, [p.mean for p in model.params], x, y, mean_rng)
        draws = [_eval_pass(model, model.sample_weights(noise_rng), x, y, noise_rng)
                 for _ in range(n_noise_samples)]
    ll = np.array([d[0] for d in draws])
    elbo = np.array([d[1] for d in draws])
    se = float(np.std(ll, ddof=1) / math.sqrt(n_noise_samples)) if n_noise_samples > 1 else math.nan
    return {
        "ll_noisy": float(ll.mean()),
        "ll_noisy_se": se,
        "elbo_noisy": float(elbo.mean()),
        "ll_mean": at_mean[0],
        "elbo_mean": at_mean[1],
        "accuracy": at_mean[2],
    }


def _eval_pass(model: Model, weights, x, y, rng: Rng):
    n = len(x)
    if model.spec.kind == "classifier":
        logits = mlp_forward(weights, x)
        ll = -ad.softmax_cross_entropy(logits, y).item()
        acc = float(np.mean(np.argmax(logits.data, axis=1) == y))
        return ll, ll, acc
    eps = rng.normal((n, model.spec.latent_dim))
    recon, kl, _ = vae_elbo_terms(model, weights, x, eps)
    return float(recon.data.mean()), float((recon.data - kl.data).mean()), None


# --- training -----------------------------------------------------------------------

@dataclass
class RunRecord:
    run_id: str
    config_digest: str
    seed: int
    axis_value: float | None
    repeat: int
    epochs: list = field(default_factory=list)
    metrics: dict = field(default_factory=lambda: {k: [] for k in METRIC_KEYS})
    capacity_bits_per_param: float = math.nan
    capacity_bits_total: float = math.nan
    parameter_count: int = 0
    wall_time: float = 0.0
    status: str = "ok"
    error: str | None = None
    model: Model | None = field(default=None, repr=False, compare=False)
    config: ExperimentConfig | None = field(default=None, repr=False, compare=False)

    def final(self, key: str) -> float:
        series = self.metrics[key]
        return series[-1] if series else math.nan

    def rows(self):
        for i, epoch in enumerate(self.epochs):
            yield epoch, {k: self.metrics[k][i] for k in METRIC_KEYS}


def _step_loss(model: Model, batch, rng: Rng, n_train: int, n_noise: int):
    if model.spec.kind == "classifier":
        return classifier_loss(model, batch, rng, n_train, n_noise)
    return vae_loss(model, batch, rng, n_train, n_noise)[0]


def train(model: Model, train_set: Dataset, test_set: Dataset, opt: OptimizerSpec, rng: Rng,
          record: RunRecord | None = None, n_train_noise: int = 1, n_eval_noise: int = 8,
          eval_every: int = 1) -> RunRecord:
    """Maximize the mean-field objective by minibatch descent on its negation.

    Metrics are recorded every ``eval_every`` epochs and at the last epoch.
    Evaluation draws its noise from fixed streams so that successive
    epochs are compared under common random numbers.
    """
    if record is None:
        record = RunRecord("run", "", rng.seed, None, 0)
    noise_rng = rng.split()
    shuffle_rng = rng.split()
    eval_root = rng.split()
    optimizer = opt.build(model.trainables())
    n = len(train_set)
    for epoch in range(1, opt.epochs + 1):
        for bx, by in batch_iter(train_set, opt.batch_size, shuffle_rng, shuffle=True, epoch=epoch):
            tape = ad.Tape()
            with tape:
                obj = _step_loss(model, (bx, by), noise_rng, n, n_train_noise)
            if not math.isfinite(obj.total):
                raise DivergenceError(epoch, obj.total)
            optimizer.zero_grad()
            tape.backward(obj.loss)
            optimizer.step()
        if epoch % eval_every == 0 or epoch == opt.epochs:
            tr = evaluate(model, train_set, Rng(eval_root.seed, eval_root.path + (0,)), n_eval_noise)
            te = evaluate(model, test_set, Rng(eval_root.seed, eval_root.path + (1,)), n_eval_noise)
            record.epochs.append(epoch)
            m = record.metrics
            m["train_ll"].append(tr["ll_noisy"])
            m["test_ll"].append(te["ll_noisy"])
            m["train_elbo_noisy"].append(tr["elbo_noisy"])
            m["test_elbo_noisy"].append(te["elbo_noisy"])
            m["train_elbo_mean"].append(tr["elbo_mean"])
            m["test_elbo_mean"].append(te["elbo_mean"])
            m["accuracy"].append(te["accuracy"])
            if not all(math.isfinite(v) for v in (tr["ll_noisy"], te["ll_noisy"])):
                raise DivergenceError(epoch, te["ll_noisy"])
    return record


def derive_seed(base_seed: int, value_index: int, repeat_index: int) -> int:
    h = hashlib.blake2b(f"{base_seed}:{value_index}:{repeat_index}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "big")


def run_experiment(cfg: ExperimentConfig, seed: int | None = None, axis_value=None, repeat: int = 0,
                   run_id: str = "run0", keep_model: bool = False) -> RunRecord:
    """Build data and model from ``cfg`` and train with ``seed``; never raises on divergence."""
    seed = cfg.seed if seed is None else seed
    started = time.perf_counter()
    train_set, test_set = load_splits(cfg)
    n_classes = n_classes_of(train_set, test_set) if cfg.kind == "classifier" else 0
    spec = model_spec_for(cfg, train_set.n_features, n_classes)
    rng = Rng(seed)
    model = build_model(spec, rng.split())
    per_param = spec.bits_per_param()
    record = RunRecord(
        run_id, cfg.digest(), seed, axis_value, repeat,
        capacity_bits_per_param=per_param,
        capacity_bits_total=per_param * model.parameter_count,
        parameter_count=model.parameter_count,
        config=cfg,
    )
    try:
        # non-finite values are caught explicitly and reported as divergence
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            train(model, train_set, test_set, OptimizerSpec.from_config(cfg), rng.split(), record,
                  cfg.train_noise_samples, cfg.eval_noise_samples, cfg.eval_every)
    except (DivergenceError, FloatingPointError) as exc:
        record.status = "failed"
        record.error = str(exc)
        log.warning("run %s failed: %s", run_id, exc)
    record.wall_time = time.perf_counter() - started
    if keep_model or cfg.save_models:
        record.model = model
    return record


# --- sweeps -----------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    repeats: int
    base: ExperimentConfig

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"axis must be one of {sorted(AXES)}, got {self.axis!r}")
        if not self.values:
            raise ValueError("sweep values must be non-empty")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "SweepSpec":
        if cfg.sweep_axis is None:
            raise ConfigError("sweep_axis", "required for a sweep")
        return cls(cfg.sweep_axis, tuple(cfg.sweep_values), cfg.repeats, cfg)

    def config_for(self, value) -> ExperimentConfig:
        key = AXES[self.axis]
        if key in ("n_train", "depth"):
            value = int(value)
        return self.base.replace(**{key: value})


def _run_task(task):
    cfg, seed, value, repeat, run_id, keep = task
    return run_experiment(cfg, seed, value, repeat, run_id, keep)


def run_sweep(spec: SweepSpec, jobs: int = 1, keep_models: bool = False) -> list[RunRecord]:
    """One run per (value, repeat), ordered by value index then repeat index."""
    tasks = []
    for vi, value in enumerate(spec.values):
        cfg = spec.config_for(value)
        for r in range(spec.repeats):
            seed = derive_seed(spec.base.seed, vi, r)
            tasks.append((cfg, seed, float(value), r, f"v{vi}r{r}", keep_models))
    if jobs <= 1:
        return [_run_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_task, tasks))


def aggregate(records: list[RunRecord], metric: str) -> list[dict]:
    """Mean and std (ddof=0) of the final-epoch ``metric`` per axis value."""
    groups: dict = {}
    for rec in records:
        groups.setdefault(rec.axis_value, []).append(rec)
    out = []
    for value, recs in groups.items():
        vals = np.array([r.final(metric) for r in recs if r.status == "ok"], dtype=np.float64)
        out.append({
            "axis_value": value,
            "mean": float(vals.mean()) if len(vals) else math.nan,
            "std": float(vals.std()) if len(vals) else math.nan,
            "n": int(len(vals)),
            "failed": sum(r.status != "ok" for r in recs),
        })
    return out
