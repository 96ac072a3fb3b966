"""Clustering with a mixture-of-Gaussians latent prior (VaDE-style).

The prior's component weights, means, and scales are trained jointly with
the encoder/decoder from random initialization. Cluster predictions are
component responsibilities at latent samples; partial observations route
through the partial posterior instead of the full encoder. Accuracy is the
best one-to-one matching between predicted clusters and labels.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import permutations

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import ndgrad as ng
from .data import Dataset, augment_noise
from .distributions import (
    DiagGaussian,
    GmmPrior,
    gmm_component_log_probs,
    gmm_component_posterior,
    log_prob,
    reparam_sample,
)
from .masking import PartialObservation
from .partial_posterior import PartialEncoder, posterior, posterior_sample
from .vae import (
    OptimizerState,
    TrainConfig,
    TrainResult,
    VaeConfig,
    VaeModel,
    adam_init,
    adam_step,
    beta_value,
    current_lr,
    decoder_dist,
    encode,
    encoder_dist,
    init_vae,
    minibatch,
    prior_dist,
)


def vade_elbo_expr(params, x, noise, beta: float, config: VaeConfig):
    """Mixture-prior ELBO with analytic responsibilities at the z sample.

    loss = -E[log p(x|z)]
           + beta * ( sum_c gamma_c KL(q(z|x) || p(z|c)) + KL(gamma || pi) )
    with gamma = p(c | z) computed from the prior at the sampled z.
    """
    q = encoder_dist(params, x, config)
    z = reparam_sample(q, noise)
    dec = decoder_dist(params, z, config)
    recon = ng.vmean(log_prob(dec, x))

    prior = prior_dist(params, config)
    gamma = gmm_component_posterior(z, prior)  # (B, K)
    # KL(q || p(.|c)) for every component, (B, K)
    comp_means = prior.means  # (K, d)
    comp_log_stds = prior.log_stds
    B = ng.value_of(x).shape[0]
    lat = config.latent_dim
    qm = ng.reshape(q.mean, (B, 1, lat))
    qs = ng.reshape(q.log_std, (B, 1, lat))
    var_ratio = ng.exp(ng.mul(ng.sub(qs, comp_log_stds), 2.0))
    delta = ng.div(ng.sub(qm, comp_means), ng.exp(comp_log_stds))
    kl_qc = ng.mul(
        ng.vsum(
            ng.sub(
                ng.add(var_ratio, ng.mul(delta, delta)),
                ng.add(1.0, ng.mul(ng.sub(qs, comp_log_stds), 2.0)),
            ),
            axis=-1,
        ),
        0.5,
    )  # (B, K)
    log_pi = ng.log(prior.weights)
    # KL(gamma || pi) with gamma log computed stably; gamma > 0 by softmax
    kl_cat = ng.vsum(ng.mul(gamma, ng.sub(ng.log(ng.add(gamma, 1e-300)), log_pi)), axis=-1)
    kl = ng.vmean(ng.add(ng.vsum(ng.mul(gamma, kl_qc), axis=-1), kl_cat))
    loss = ng.add(ng.neg(recon), ng.mul(kl, beta))
    return loss, recon, kl


def vade_elbo(x: np.ndarray, model: VaeModel, rng: np.random.Generator, beta: float = 1.0):
    """Single-sample mixture-prior ELBO for a batch: (loss, recon, kl)."""
    x = np.atleast_2d(x)
    noise = rng.standard_normal((x.shape[0], model.config.latent_dim))
    g = ng.Graph(lambda p: vade_elbo_expr(p, x, noise, beta, model.config), "vade")
    loss, recon, kl = ng.evaluate(g, model.params)
    for name, v in [("reconstruction", recon), ("kl", kl)]:
        if not np.isfinite(v):
            raise ng.NumericalError(f"mixture ELBO {name} term is non-finite")
    return float(loss), float(recon), float(kl)


def train_vade(
    dataset: Dataset, model_config: VaeConfig, cfg: TrainConfig, dtype=np.float64
) -> TrainResult:
    """Train encoder, decoder, and mixture prior jointly from scratch."""
    if model_config.prior != "gmm":
        raise ValueError("train_vade requires a mixture prior configuration")
    if dataset.n == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    model = init_vae(model_config, rng, dtype)
    params = model.params
    state = adam_init(params, cfg.lr, cfg.lr_decay_rate, cfg.lr_decay_every)
    metrics: list[dict] = []
    last_good = params
    for step in range(cfg.steps):
        batch = minibatch(dataset, cfg.batch_size, rng).astype(dtype)
        batch = augment_noise(batch, cfg.noise_sigma, rng).astype(dtype)
        noise = rng.standard_normal((batch.shape[0], model_config.latent_dim)).astype(dtype)
        beta = beta_value(cfg.beta, step)
        graph = ng.Graph(
            lambda p: vade_elbo_expr(p, batch, noise, beta, model_config)[0], "vade_loss"
        )
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
            g = ng.Graph(lambda p: vade_elbo_expr(p, batch, noise, beta, model_config))
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


def prior_from_model(model: VaeModel) -> GmmPrior:
    """Numpy-valued mixture prior extracted from a trained model."""
    leaves = {k: ng.Node(v) for k, v in model.params.items()}
    prior = prior_dist(leaves, model.config)
    return GmmPrior(
        weights=ng.value_of(prior.weights),
        means=ng.value_of(prior.means),
        log_stds=ng.value_of(prior.log_stds),
    )


def cluster_posterior_full(
    model: VaeModel, x: np.ndarray, n_samples: int = 50, rng: np.random.Generator | None = None
) -> np.ndarray:
    """q(c | x): responsibilities averaged over full-encoder latent samples."""
    rng = rng or np.random.default_rng(0)
    x = np.atleast_2d(x)
    q = encode(model, x)
    noise = rng.standard_normal((n_samples,) + q.mean.shape)
    zs = q.mean + np.exp(q.log_std) * noise  # (n, B, lat)
    prior = prior_from_model(model)
    post = np.asarray(gmm_component_posterior(zs, prior))  # (n, B, K)
    return post.mean(axis=0)


def cluster_posterior_partial(
    po: PartialEncoder,
    prior: GmmPrior,
    p: PartialObservation,
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """q(c | x_o): responsibilities averaged over partial-posterior samples."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = rng or np.random.default_rng(0)
    dist = posterior(po, p)
    zs = posterior_sample(dist, rng, n_samples)
    return np.asarray(gmm_component_posterior(zs, prior)).mean(axis=0)


def clustering_accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Best one-to-one cluster/label matching accuracy in [0, 1].

    Exhaustive over permutations for up to 8 clusters, Hungarian assignment
    via scipy beyond that.
    """
    predictions = np.asarray(predictions, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if predictions.size == 0 or predictions.shape != labels.shape:
        raise ValueError("predictions and labels must be equal-length and non-empty")
    k = int(max(predictions.max(), labels.max())) + 1
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (predictions, labels), 1)
    if k <= 8:
        best = max(
            sum(confusion[i, perm[i]] for i in range(k)) for perm in permutations(range(k))
        )
    else:
        rows, cols = linear_sum_assignment(-confusion)
        best = int(confusion[rows, cols].sum())
    return best / predictions.size


def accuracy_vs_fraction(
    model: VaeModel,
    po: PartialEncoder,
    xs: np.ndarray,
    labels: np.ndarray,
    fractions: list[float],
    n_samples: int = 50,
    rng: np.random.Generator | None = None,
) -> list[tuple[float, float]]:
    """Clustering accuracy as the observed fraction varies (curve export)."""
    from .masking import ObservationMask, sample_mask_uniform_fraction

    rng = rng or np.random.default_rng(0)
    prior = prior_from_model(model)
    out = []
    d = xs.shape[1]
    for frac in fractions:
        preds = []
        for x in xs:
            mask = sample_mask_uniform_fraction(d, frac, frac, rng)
            post = cluster_posterior_partial(
                po, prior, PartialObservation(x, mask), n_samples, rng
            )
            preds.append(int(np.argmax(post)))
        out.append((frac, clustering_accuracy(np.asarray(preds), labels)))
    return out
