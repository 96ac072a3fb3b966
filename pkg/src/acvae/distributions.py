"""Probability distributions shared across the package.

All distribution values are immutable; every operation is pure and takes any
randomness as an explicit noise array or numpy Generator. Fields may hold
plain arrays or ndgrad Nodes: the math is written with the dispatching ops,
so log-densities and KLs stay differentiable when they appear in a loss.

Shapes follow a batched convention: parameter fields have shape
(..., d) (or (..., d, d) for Cholesky factors) and log_prob reduces over the
final event axis, returning one value per batch row.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np

from . import ndgrad as ng

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class DiagGaussian:
    mean: Any
    log_std: Any

    @property
    def dim(self) -> int:
        return ng.value_of(self.mean).shape[-1]


@dataclass(frozen=True)
class FullCovGaussian:
    """Gaussian with covariance C = L L^T given by its Cholesky factor."""

    mean: Any
    chol_lower: Any

    @property
    def dim(self) -> int:
        return ng.value_of(self.mean).shape[-1]


@dataclass(frozen=True)
class MixtureOfGaussians1D:
    """Per-row mixture over one scalar variable; fields are (..., n_comp)."""

    log_weights: Any  # normalized log weights (log simplex)
    means: Any
    log_stds: Any


@dataclass(frozen=True)
class BernoulliVector:
    logits: Any

    @property
    def dim(self) -> int:
        return ng.value_of(self.logits).shape[-1]


@dataclass(frozen=True)
class GmmPrior:
    """Mixture of diagonal Gaussians; doubles as the clustering prior."""

    weights: Any  # (K,), simplex
    means: Any  # (K, d)
    log_stds: Any  # (K, d)

    @property
    def n_components(self) -> int:
        return ng.value_of(self.weights).shape[0]

    @property
    def dim(self) -> int:
        return ng.value_of(self.means).shape[-1]


# ---------------------------------------------------------------------------
# log densities


def _check_event_dim(d: int, x) -> None:
    xa = ng.value_of(x)
    if xa.shape[-1] != d:
        raise ng.ShapeError(f"event dimension mismatch: dist has {d}, x has {xa.shape[-1]}")


def diag_gaussian_log_prob(dist: DiagGaussian, x):
    _check_event_dim(dist.dim, x)
    z = ng.div(ng.sub(x, dist.mean), ng.exp(dist.log_std))
    per = ng.add(ng.mul(ng.mul(z, z), 0.5), dist.log_std)
    return ng.neg(ng.add(ng.vsum(per, axis=-1), 0.5 * dist.dim * LOG_2PI))


def full_cov_log_prob(dist: FullCovGaussian, x):
    """Log-density via the Cholesky factor (triangular solve, no inverse)."""
    _check_event_dim(dist.dim, x)
    y = ng.chol_solve_vec(dist.chol_lower, ng.sub(x, dist.mean))
    quad = ng.mul(ng.vsum(ng.mul(y, y), axis=-1), 0.5)
    logdet = ng.vsum(ng.log(ng.diag_part(dist.chol_lower)), axis=-1)
    return ng.neg(ng.add(ng.add(quad, logdet), 0.5 * dist.dim * LOG_2PI))


def mog1d_log_prob(dist: MixtureOfGaussians1D, x):
    """x has the mixture's batch shape (no event axis)."""
    xa = x if isinstance(x, ng.Node) else np.asarray(x)
    xe = ng.reshape(xa, ng.value_of(xa).shape + (1,)) if isinstance(xa, ng.Node) else xa[..., None]
    z = ng.div(ng.sub(xe, dist.means), ng.exp(dist.log_stds))
    comp = ng.sub(
        ng.neg(ng.add(ng.mul(ng.mul(z, z), 0.5), 0.5 * LOG_2PI)), dist.log_stds
    )
    return ng.logsumexp(ng.add(dist.log_weights, comp), axis=-1)


def bernoulli_log_prob(dist: BernoulliVector, x):
    """x in {0,1}; stable via softplus: log p = -(1-x)*sp(l) - x*sp(-l)."""
    _check_event_dim(dist.dim, x)
    pos = ng.mul(x, ng.softplus(ng.neg(dist.logits)))
    negt = ng.mul(ng.sub(1.0, x), ng.softplus(dist.logits))
    return ng.neg(ng.vsum(ng.add(pos, negt), axis=-1))


def gmm_prior_log_prob(prior: GmmPrior, z):
    """log p(z) for the mixture prior; z is (..., d)."""
    _check_event_dim(prior.dim, z)
    lpc = gmm_component_log_probs(prior, z)
    w = ng.log(prior.weights) if isinstance(prior.weights, ng.Node) else np.log(
        ng.value_of(prior.weights)
    )
    return ng.logsumexp(ng.add(lpc, w), axis=-1)


def gmm_component_log_probs(prior: GmmPrior, z):
    """log N(z; mu_c, diag sigma_c^2) for every component, shape (..., K)."""
    za = z if isinstance(z, ng.Node) else np.asarray(z)
    d = prior.dim
    ze = (
        ng.reshape(za, ng.value_of(za).shape[:-1] + (1, d))
        if isinstance(za, ng.Node)
        else za[..., None, :]
    )
    u = ng.div(ng.sub(ze, prior.means), ng.exp(prior.log_stds))
    per = ng.add(ng.mul(ng.mul(u, u), 0.5), prior.log_stds)
    return ng.neg(ng.add(ng.vsum(per, axis=-1), 0.5 * d * LOG_2PI))


def log_prob(dist, x):
    """Exact log-density of `x` under any distribution in this module."""
    if isinstance(dist, DiagGaussian):
        return diag_gaussian_log_prob(dist, x)
    if isinstance(dist, FullCovGaussian):
        return full_cov_log_prob(dist, x)
    if isinstance(dist, MixtureOfGaussians1D):
        return mog1d_log_prob(dist, x)
    if isinstance(dist, BernoulliVector):
        return bernoulli_log_prob(dist, x)
    if isinstance(dist, GmmPrior):
        return gmm_prior_log_prob(dist, x)
    raise TypeError(f"no log_prob for {type(dist).__name__}")


# ---------------------------------------------------------------------------
# sampling


def reparam_sample(dist, noise):
    """z = mean + scale * noise, differentiable w.r.t. the parameters."""
    if isinstance(dist, DiagGaussian):
        _check_event_dim(dist.dim, noise)
        return ng.add(dist.mean, ng.mul(ng.exp(dist.log_std), noise))
    if isinstance(dist, FullCovGaussian):
        _check_event_dim(dist.dim, noise)
        noise_col = ng.value_of(noise)[..., None]
        return ng.add(dist.mean, ng.matmul(dist.chol_lower, noise_col)[..., 0])
    raise TypeError(f"no reparameterized sampling for {type(dist).__name__}")


def sample(dist, rng: np.random.Generator, n: int | None = None):
    """Plain (non-differentiable) sampling; `n` prepends a sample axis."""
    if isinstance(dist, (DiagGaussian, FullCovGaussian)):
        mean = ng.value_of(dist.mean)
        shape = mean.shape if n is None else (n,) + mean.shape
        return ng.value_of(reparam_sample(dist, rng.standard_normal(shape)))
    if isinstance(dist, BernoulliVector):
        p = ng.value_of(ng.sigmoid(dist.logits))
        shape = p.shape if n is None else (n,) + p.shape
        return (rng.random(shape) < p).astype(p.dtype)
    if isinstance(dist, MixtureOfGaussians1D):
        logw = ng.value_of(dist.log_weights)
        means = ng.value_of(dist.means)
        stds = np.exp(ng.value_of(dist.log_stds))
        shape = logw.shape[:-1] if n is None else (n,) + logw.shape[:-1]
        w = np.exp(logw - logw.max(axis=-1, keepdims=True))
        w = w / w.sum(axis=-1, keepdims=True)
        cum = np.cumsum(np.broadcast_to(w, shape + w.shape[-1:]), axis=-1)
        u = rng.random(shape + (1,))
        ks = np.minimum(np.sum(u > cum, axis=-1), w.shape[-1] - 1)
        mu = np.take_along_axis(
            np.broadcast_to(means, shape + means.shape[-1:]), ks[..., None], -1
        )[..., 0]
        sd = np.take_along_axis(
            np.broadcast_to(stds, shape + stds.shape[-1:]), ks[..., None], -1
        )[..., 0]
        return mu + sd * rng.standard_normal(shape)
    if isinstance(dist, GmmPrior):
        k = rng.choice(dist.n_components, size=n or 1, p=ng.value_of(dist.weights))
        mu = ng.value_of(dist.means)[k]
        sd = np.exp(ng.value_of(dist.log_stds))[k]
        out = mu + sd * rng.standard_normal(mu.shape)
        return out if n is not None else out[0]
    raise TypeError(f"no sampler for {type(dist).__name__}")


# ---------------------------------------------------------------------------
# divergences and entropies


def kl_diag(p: DiagGaussian, q: DiagGaussian):
    """Closed-form KL(p || q) between diagonal Gaussians, always >= 0."""
    if p.dim != q.dim:
        raise ng.ShapeError(f"KL dimension mismatch: {p.dim} vs {q.dim}")
    var_ratio = ng.exp(ng.mul(ng.sub(p.log_std, q.log_std), 2.0))
    delta = ng.div(ng.sub(p.mean, q.mean), ng.exp(q.log_std))
    per = ng.mul(
        ng.sub(
            ng.add(var_ratio, ng.mul(delta, delta)),
            ng.add(1.0, ng.mul(ng.sub(p.log_std, q.log_std), 2.0)),
        ),
        0.5,
    )
    return ng.vsum(per, axis=-1)


def entropy(dist):
    """Differential entropy in nats."""
    if isinstance(dist, DiagGaussian):
        d = dist.dim
        return ng.add(ng.vsum(dist.log_std, axis=-1), 0.5 * d * (LOG_2PI + 1.0))
    if isinstance(dist, FullCovGaussian):
        d = dist.dim
        return ng.add(
            ng.vsum(ng.log(ng.diag_part(dist.chol_lower)), axis=-1),
            0.5 * d * (LOG_2PI + 1.0),
        )
    raise TypeError(f"no entropy for {type(dist).__name__}")


def gmm_component_posterior(z, prior: GmmPrior):
    """p(c | z) over mixture components, log-sum-exp stabilized."""
    logits = ng.add(
        gmm_component_log_probs(prior, z),
        ng.log(prior.weights)
        if isinstance(prior.weights, ng.Node)
        else np.log(ng.value_of(prior.weights)),
    )
    return ng.exp(ng.sub(logits, ng.logsumexp(logits, axis=-1, keepdims=True)))
