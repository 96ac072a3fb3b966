"""VAE with residual-MLP encoder/decoder, ELBO training with beta schedules,
and Adam with stepwise exponential learning-rate decay.

The decoder factorizes over features (diagonal Gaussian for real-valued data,
independent Bernoullis for binary data), so per-feature marginals are direct.
Training loops are single-writer: parameter updates produce new ParamSets and
all sampling flows from one seeded Generator, which makes runs bit-reproducible
at a fixed seed, precision, and thread count of 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import ndgrad as ng
from .data import Dataset, augment_noise
from .distributions import (
    BernoulliVector,
    DiagGaussian,
    GmmPrior,
    kl_diag,
    log_prob,
    reparam_sample,
)
from .nets import MlpSpec, init_mlp, mlp_forward

LOG_STD_BOUND = 7.0


def clamp_log_std(raw):
    """Smooth clamp of log-std outputs to (-7, 7) to avoid early blowups."""
    return ng.mul(ng.tanh(ng.div(raw, LOG_STD_BOUND)), LOG_STD_BOUND)


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class VaeConfig:
    data_dim: int
    latent_dim: int
    hidden: int = 128
    n_blocks: int = 2
    layer_norm: bool = False
    decoder: str = "gaussian"  # gaussian | bernoulli
    prior: str = "standard"  # standard | gmm
    n_prior_components: int = 1

    def encoder_spec(self) -> MlpSpec:
        return MlpSpec(
            self.data_dim, self.hidden, self.n_blocks, 2 * self.latent_dim, self.layer_norm
        )

    def decoder_spec(self) -> MlpSpec:
        out = 2 * self.data_dim if self.decoder == "gaussian" else self.data_dim
        return MlpSpec(self.latent_dim, self.hidden, self.n_blocks, out, self.layer_norm)


@dataclass(frozen=True)
class VaeModel:
    config: VaeConfig
    params: ng.ParamSet

    def replace_params(self, params: ng.ParamSet) -> "VaeModel":
        return VaeModel(self.config, params)


def init_vae(config: VaeConfig, rng: np.random.Generator, dtype=np.float64) -> VaeModel:
    """Fresh model; output heads start at zero so q(z|x) begins standard normal."""
    items = init_mlp(config.encoder_spec(), rng, "enc", dtype, zero_output=True)
    items += init_mlp(config.decoder_spec(), rng, "dec", dtype, zero_output=True)
    if config.prior == "gmm":
        k, d = config.n_prior_components, config.latent_dim
        items += [
            ("prior.logits", np.zeros(k, dtype=dtype)),
            ("prior.means", rng.standard_normal((k, d)).astype(dtype)),
            ("prior.log_stds", np.zeros((k, d), dtype=dtype)),
        ]
    return VaeModel(config, ng.ParamSet(items))


def encoder_dist(params, x, config: VaeConfig) -> DiagGaussian:
    h = mlp_forward(params, "enc", x, config.encoder_spec())
    lat = config.latent_dim
    return DiagGaussian(mean=h[..., :lat], log_std=clamp_log_std(h[..., lat:]))


def decoder_dist(params, z, config: VaeConfig):
    h = mlp_forward(params, "dec", z, config.decoder_spec())
    if config.decoder == "gaussian":
        d = config.data_dim
        return DiagGaussian(mean=h[..., :d], log_std=clamp_log_std(h[..., d:]))
    return BernoulliVector(logits=h)


def prior_dist(params, config: VaeConfig):
    if config.prior == "standard":
        return DiagGaussian(
            mean=np.zeros(config.latent_dim), log_std=np.zeros(config.latent_dim)
        )
    logits = params["prior.logits"]
    w = ng.exp(ng.sub(logits, ng.logsumexp(logits, axis=-1, keepdims=True)))
    w = ng.reshape(w, (config.n_prior_components,))
    return GmmPrior(weights=w, means=params["prior.means"], log_stds=params["prior.log_stds"])


def encode(model: VaeModel, x: np.ndarray) -> DiagGaussian:
    """q(z|x) with plain-array parameters (inference use)."""

    def fn(p, xv):
        q = encoder_dist(p, xv, model.config)
        return q.mean, q.log_std

    mean, log_std = ng.evaluate(ng.Graph(fn, "enc"), model.params, x)
    return DiagGaussian(mean=mean, log_std=log_std)


def decode(model: VaeModel, z: np.ndarray):
    """p(x|z) with plain-array parameters (inference use)."""
    cfg = model.config
    g = ng.Graph(lambda p, zv: mlp_forward(p, "dec", zv, cfg.decoder_spec()), "dec")
    h = ng.evaluate(g, model.params, z)
    if cfg.decoder == "gaussian":
        d = cfg.data_dim
        return DiagGaussian(
            mean=h[..., :d], log_std=ng.value_of(clamp_log_std(h[..., d:]))
        )
    return BernoulliVector(logits=h)


def decoder_mean(dist) -> np.ndarray:
    if isinstance(dist, DiagGaussian):
        return ng.value_of(dist.mean)
    return ng.value_of(ng.sigmoid(dist.logits))


# ---------------------------------------------------------------------------
# ELBO


def elbo_expr(params, x, noise, beta: float, config: VaeConfig):
    """Differentiable single-sample ELBO terms averaged over the batch.

    Returns (loss, recon, kl) where loss = -recon + beta * kl exactly.
    Only valid for the standard-normal prior; the mixture-prior variant
    lives in `clustering`.
    """
    q = encoder_dist(params, x, config)
    z = reparam_sample(q, noise)
    dec = decoder_dist(params, z, config)
    recon = ng.vmean(log_prob(dec, x))
    prior = DiagGaussian(
        mean=np.zeros(config.latent_dim), log_std=np.zeros(config.latent_dim)
    )
    kl = ng.vmean(kl_diag(q, prior))
    loss = ng.add(ng.neg(recon), ng.mul(kl, beta))
    return loss, recon, kl


def elbo(x: np.ndarray, model: VaeModel, beta: float, rng: np.random.Generator):
    """Single-sample ELBO estimate: (loss, recon, kl) as floats.

    Raises NumericalError naming the term that went non-finite.
    """
    x = np.atleast_2d(x)
    if x.shape[-1] != model.config.data_dim:
        raise ng.ShapeError(
            f"x dim {x.shape[-1]} != model data_dim {model.config.data_dim}"
        )
    noise = rng.standard_normal((x.shape[0], model.config.latent_dim))
    g = ng.Graph(lambda p: elbo_expr(p, x, noise, beta, model.config), "elbo")
    loss, recon, kl = ng.evaluate(g, model.params)
    for name, v in [("reconstruction", recon), ("kl", kl)]:
        if not np.isfinite(v):
            raise ng.NumericalError(f"ELBO {name} term is non-finite")
    return float(loss), float(recon), float(kl)


# ---------------------------------------------------------------------------
# beta schedules


@dataclass(frozen=True)
class BetaSchedule:
    """KL-weight schedule.

    kind "constant": always final_value. kind "monotonic": zero through
    delay_steps, then linear up to final_value at step `period` (the final
    training step). kind "cyclical": zero through delay_steps, then cycles
    of length `period`: linear ramp over the first half, held for the second.
    """

    kind: str = "constant"
    delay_steps: int = 0
    period: int = 1
    final_value: float = 1.0


def beta_value(schedule: BetaSchedule, step: int) -> float:
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    if schedule.kind == "constant":
        return schedule.final_value
    if step < schedule.delay_steps:
        return 0.0
    if schedule.kind == "monotonic":
        span = max(schedule.period - schedule.delay_steps, 1)
        frac = min((step - schedule.delay_steps) / span, 1.0)
        return schedule.final_value * frac
    if schedule.kind == "cyclical":
        t = (step - schedule.delay_steps) % schedule.period
        frac = min(t / (schedule.period / 2.0), 1.0)
        return schedule.final_value * frac
    raise ValueError(f"unknown beta schedule kind: {schedule.kind!r}")


# ---------------------------------------------------------------------------
# Adam with stepwise exponential lr decay


@dataclass(frozen=True)
class OptimizerState:
    m: ng.ParamSet
    v: ng.ParamSet
    step: int
    base_lr: float
    decay_rate: float = 0.9
    decay_every: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(
    params: ng.ParamSet, base_lr: float, decay_rate: float = 0.9, decay_every: int = 5000
) -> OptimizerState:
    return OptimizerState(
        m=ng.zeros_like_params(params),
        v=ng.zeros_like_params(params),
        step=0,
        base_lr=base_lr,
        decay_rate=decay_rate,
        decay_every=decay_every,
    )


def current_lr(state: OptimizerState) -> float:
    return state.base_lr * state.decay_rate ** (state.step // state.decay_every)


def adam_step(
    params: ng.ParamSet, grads: ng.ParamSet, state: OptimizerState
) -> tuple[ng.ParamSet, OptimizerState]:
    """One bias-corrected Adam update; returns fresh params and state."""
    for name in grads:
        if not np.all(np.isfinite(grads[name])):
            raise ng.NumericalError(f"non-finite gradient for parameter {name!r}")
    lr = current_lr(state)
    t = state.step + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        new_m[name] = m
        new_v[name] = v
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params.replace(new_p), OptimizerState(
        m=state.m.replace(new_m),
        v=state.v.replace(new_v),
        step=t,
        base_lr=state.base_lr,
        decay_rate=state.decay_rate,
        decay_every=state.decay_every,
        beta1=state.beta1,
        beta2=state.beta2,
        eps=state.eps,
    )


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    batch_size: int
    lr: float = 1e-3
    lr_decay_rate: float = 0.9
    lr_decay_every: int = 5000
    beta: BetaSchedule = field(default_factory=BetaSchedule)
    noise_sigma: float = 0.0
    seed: int = 0
    log_every: int = 500


@dataclass(frozen=True)
class TrainResult:
    model: VaeModel
    opt_state: OptimizerState
    metrics: list[dict]
    seed: int
    step: int
    diverged_at: int | None = None


def minibatch(dataset: Dataset, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    idx = rng.integers(0, dataset.n, size=batch_size)
    return dataset.x[idx]


def train_vae(
    dataset: Dataset, model_config: VaeConfig, cfg: TrainConfig, dtype=np.float64
) -> TrainResult:
    """ELBO training on fully observed data.

    On divergence (non-finite loss or gradients) training stops and the
    result carries the last good parameters with `diverged_at` set.
    """
    if dataset.n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = init_vae(model_config, rng, dtype)
    params = model.params
    state = adam_init(params, cfg.lr, cfg.lr_decay_rate, cfg.lr_decay_every)
    metrics: list[dict] = []

    def loss_graph(batch, noise, beta):
        return ng.Graph(
            lambda p: elbo_expr(p, batch, noise, beta, model_config)[0], "vae_loss"
        )

    last_good = params
    for step in range(cfg.steps):
        batch = minibatch(dataset, cfg.batch_size, rng).astype(dtype)
        batch = augment_noise(batch, cfg.noise_sigma, rng).astype(dtype)
        noise = rng.standard_normal((batch.shape[0], model_config.latent_dim)).astype(dtype)
        beta = beta_value(cfg.beta, step)
        graph = loss_graph(batch, noise, beta)
        try:
            loss, grads = ng.value_and_gradient(graph, params)
            if not np.isfinite(loss):
                raise ng.NumericalError("loss is non-finite")
            last_good = params
            params, state = adam_step(params, grads, state)
        except ng.NumericalError:
            return TrainResult(
                model.replace_params(last_good), state, metrics, cfg.seed, step, step
            )
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            g = ng.Graph(lambda p: elbo_expr(p, batch, noise, beta, model_config), "parts")
            _, recon, kl = ng.evaluate(g, params)
            metrics.append(
                {
                    "step": step,
                    "loss": float(loss),
                    "recon": float(recon),
                    "kl": float(kl),
                    "beta": float(beta),
                    "lr": current_lr(state),
                }
            )
    return TrainResult(model.replace_params(params), state, metrics, cfg.seed, cfg.steps)
