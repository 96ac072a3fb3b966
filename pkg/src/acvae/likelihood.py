"""Arbitrary conditional likelihood estimation and imputation.

Joint likelihoods are importance-sampled with the full encoder as proposal;
observed-subset likelihoods use the partial posterior as proposal with the
factorized decoder restricted to the observed features. The conditional
log-likelihood is their difference (two independent runs, standard errors
combined in quadrature). Everything stays in log-space: ratios are shifted
by their maximum before exponentiation, so no intermediate exponential can
exceed 1.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng
from .distributions import DiagGaussian, log_prob
from .masking import ObservationMask, PartialObservation
from .partial_posterior import (
    PartialEncoder,
    posterior,
    posterior_log_prob,
    posterior_sample,
)
from .vae import VaeModel, decode, decoder_mean, encode, prior_dist


@dataclass(frozen=True)
class LikelihoodEstimate:
    value: float  # nats
    n_samples: int
    standard_error: float

    def __post_init__(self):
        if self.standard_error < 0 or not np.isfinite(self.value):
            raise ValueError("estimate must have a finite value and SE >= 0")


def log_mean_exp(logs: np.ndarray) -> tuple[float, float]:
    """Stable log of the mean of exp(logs) plus a delta-method SE.

    The shift keeps every exponentiated intermediate at most 1 (overflow
    guard). Warns when one sample carries >99% of the total weight.
    """
    logs = np.asarray(logs, dtype=np.float64)
    n = logs.size
    m = logs.max()
    shifted = logs - m
    assert shifted.max() <= 0.0  # log-space guard: no exponential overflow
    r = np.exp(shifted)
    total = r.sum()
    if n > 1 and r.max() / total > 0.99:
        warnings.warn(
            "importance weights degenerate: one sample carries >99% of the mass",
            RuntimeWarning,
        )
    mean_r = total / n
    se = 0.0
    if n > 1:
        se = float(r.std(ddof=1) / (mean_r * np.sqrt(n)))
    return float(m + np.log(mean_r)), se


def _prior_log_prob(model: VaeModel, z: np.ndarray) -> np.ndarray:
    leaves = {k: ng.Node(v) for k, v in model.params.items()}
    return np.asarray(ng.value_of(log_prob(prior_dist(leaves, model.config), z)))


def estimate_joint_ll(
    model: VaeModel, x: np.ndarray, n: int, rng: np.random.Generator
) -> LikelihoodEstimate:
    """Importance-sampled log p(x) with the full encoder as proposal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    q = encode(model, x[None, :])
    q1 = DiagGaussian(mean=q.mean[0], log_std=q.log_std[0])
    zs = ng.value_of(
        np.asarray(q1.mean) + np.exp(q1.log_std) * rng.standard_normal((n, q1.dim))
    )
    dec = decode(model, zs)
    log_px_z = np.asarray(log_prob(dec, np.broadcast_to(x, (n, x.size))))
    logs = log_px_z + _prior_log_prob(model, zs) - np.asarray(log_prob(q1, zs))
    value, se = log_mean_exp(logs)
    return LikelihoodEstimate(value=value, n_samples=n, standard_error=se)


def _observed_log_lik(model: VaeModel, zs: np.ndarray, p: PartialObservation) -> np.ndarray:
    """sum over observed i of log p(x_i | z) under the factorized decoder."""
    obs = p.mask.observed_indices()
    if obs.size == 0:
        return np.zeros(zs.shape[0])
    dec = decode(model, zs)
    if isinstance(dec, DiagGaussian):
        sub = DiagGaussian(mean=dec.mean[:, obs], log_std=dec.log_std[:, obs])
    else:
        sub = type(dec)(logits=dec.logits[:, obs])
    return np.asarray(log_prob(sub, np.broadcast_to(p.values[obs], (zs.shape[0], obs.size))))


def estimate_observed_ll(
    model: VaeModel,
    po: PartialEncoder,
    p: PartialObservation,
    n: int,
    rng: np.random.Generator,
) -> LikelihoodEstimate:
    """Importance-sampled log p(x_o) with the partial posterior as proposal."""
    if n < 1:
        raise ValueError("n must be >= 1")
    q = posterior(po, p)
    zs = posterior_sample(q, rng, n)
    logs = (
        _observed_log_lik(model, zs, p)
        + _prior_log_prob(model, zs)
        - posterior_log_prob(q, zs)
    )
    value, se = log_mean_exp(logs)
    return LikelihoodEstimate(value=value, n_samples=n, standard_error=se)


def conditional_ll(
    model: VaeModel,
    po: PartialEncoder,
    x: np.ndarray,
    mask: ObservationMask,
    n: int,
    rng: np.random.Generator,
) -> LikelihoodEstimate:
    """log p(x_u | x_o) as joint minus observed, SEs combined in quadrature."""
    joint = estimate_joint_ll(model, x, n, rng)
    observed = estimate_observed_ll(model, po, PartialObservation(x, mask), n, rng)
    return LikelihoodEstimate(
        value=joint.value - observed.value,
        n_samples=n,
        standard_error=float(np.hypot(joint.standard_error, observed.standard_error)),
    )


@dataclass(frozen=True)
class ImputationResult:
    point: np.ndarray  # full-length vector; observed coords pass through
    samples: np.ndarray  # (n_latents, d) per-latent decoder means


def impute(
    model: VaeModel,
    po: PartialEncoder,
    p: PartialObservation,
    n_latents: int = 50,
    rng: np.random.Generator | None = None,
) -> ImputationResult:
    """Average the decoder mean over latents drawn from q(z | x_o)."""
    if n_latents < 1:
        raise ValueError("n_latents must be >= 1")
    rng = rng or np.random.default_rng(0)
    q = posterior(po, p)
    zs = posterior_sample(q, rng, n_latents)
    means = decoder_mean(decode(model, zs))
    point = p.values.copy()
    uno = p.mask.unobserved_indices()
    point[uno] = means.mean(axis=0)[uno]
    return ImputationResult(point=point, samples=means)


def zero_impute_baseline(model: VaeModel, p: PartialObservation) -> np.ndarray:
    """Zero-fill x (no bitmask), push through the full encoder's mean and the
    decoder mean; the comparison baseline, deterministic."""
    x_zero = p.values * p.mask.bits
    q = encode(model, x_zero[None, :])
    out = decoder_mean(decode(model, q.mean))
    point = p.values.copy()
    uno = p.mask.unobserved_indices()
    point[uno] = out[0][uno]
    return point
