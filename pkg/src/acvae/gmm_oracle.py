"""Ground-truth Gaussian mixture with exact conditionals.

This is the analytic harness the models are validated against: it provides
the generating density, its marginal over any feature subset, and the exact
conditional mixture over unobserved features given observed ones, all
computed through Cholesky factors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from .masking import PartialObservation

LOG_2PI = float(np.log(2.0 * np.pi))


def _mvn_log_pdf(x: np.ndarray, mean: np.ndarray, chol: np.ndarray) -> np.ndarray:
    """log N(x; mean, L L^T) for x (..., d)."""
    diff = x - mean
    y = solve_triangular(chol, diff.reshape(-1, diff.shape[-1]).T, lower=True).T
    quad = np.sum(y * y, axis=-1).reshape(diff.shape[:-1])
    logdet = np.sum(np.log(np.diagonal(chol)))
    d = mean.shape[-1]
    return -0.5 * (quad + d * LOG_2PI) - logdet


def _chol_with_jitter(cov: np.ndarray, jitter: float = 1e-9) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        warnings.warn(
            f"covariance block singular; regularizing with {jitter} jitter",
            RuntimeWarning,
        )
        return np.linalg.cholesky(cov + jitter * np.eye(cov.shape[0]))


@dataclass(frozen=True)
class GmmOracle:
    """Full-covariance Gaussian mixture over d features."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must form a simplex")
        for c in self.covs:
            if not np.allclose(c, c.T, atol=1e-10):
                raise ValueError("covariances must be symmetric")

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[-1]

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        """Exact joint log-density, (..., d) -> (...)."""
        return self.marginal_log_pdf(x, np.arange(self.dim))

    def marginal_log_pdf(self, values: np.ndarray, indices: np.ndarray) -> np.ndarray:
        """Log-density of the marginal over `indices` at values[..., indices]."""
        indices = np.asarray(indices, dtype=int)
        values = np.asarray(values, dtype=np.float64)
        if indices.size == 0:
            return np.zeros(values.shape[:-1])
        xs = values[..., indices]
        comp = np.stack(
            [
                _mvn_log_pdf(
                    xs,
                    self.means[c][indices],
                    _chol_with_jitter(self.covs[c][np.ix_(indices, indices)]),
                )
                for c in range(self.n_components)
            ],
            axis=-1,
        )
        logits = comp + np.log(self.weights)
        m = logits.max(axis=-1, keepdims=True)
        return (m + np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True)))[..., 0]

    def component_responsibilities(self, x: np.ndarray) -> np.ndarray:
        """p(c | x) under the mixture, (..., d) -> (..., K)."""
        comp = np.stack(
            [
                _mvn_log_pdf(x, self.means[c], _chol_with_jitter(self.covs[c]))
                for c in range(self.n_components)
            ],
            axis=-1,
        )
        logits = comp + np.log(self.weights)
        m = logits.max(axis=-1, keepdims=True)
        p = np.exp(logits - m)
        return p / p.sum(axis=-1, keepdims=True)

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Draw n samples plus their generating component labels."""
        ks = rng.choice(self.n_components, size=n, p=self.weights)
        chols = np.stack([_chol_with_jitter(c) for c in self.covs])
        eps = rng.standard_normal((n, self.dim))
        return self.means[ks] + np.einsum("nij,nj->ni", chols[ks], eps), ks

    def conditional(self, p: PartialObservation) -> "ConditionalGmm":
        """Exact p(x_u | x_o) as a mixture over the unobserved block.

        Empty o yields the marginal mixture over u. Per component the usual
        Gaussian conditioning applies, with every solve done through the
        Cholesky factor of the observed block.
        """
        obs = p.mask.observed_indices()
        uno = p.mask.unobserved_indices()
        k = self.n_components
        if obs.size == 0:
            return ConditionalGmm(
                indices=uno,
                weights=self.weights.copy(),
                means=self.means[:, uno].copy(),
                covs=np.stack([c[np.ix_(uno, uno)] for c in self.covs]),
            )
        x_o = p.values[obs]
        log_w = np.empty(k)
        means = np.empty((k, uno.size))
        covs = np.empty((k, uno.size, uno.size))
        for c in range(k):
            mu_o = self.means[c][obs]
            mu_u = self.means[c][uno]
            s_oo = self.covs[c][np.ix_(obs, obs)]
            s_uo = self.covs[c][np.ix_(uno, obs)]
            s_uu = self.covs[c][np.ix_(uno, uno)]
            chol_oo = _chol_with_jitter(s_oo)
            log_w[c] = np.log(self.weights[c]) + _mvn_log_pdf(x_o, mu_o, chol_oo)
            gain = cho_solve((chol_oo, True), s_uo.T).T  # s_uo @ s_oo^-1
            means[c] = mu_u + gain @ (x_o - mu_o)
            covs[c] = s_uu - gain @ s_uo.T
        log_w -= log_w.max()
        w = np.exp(log_w)
        return ConditionalGmm(indices=uno, weights=w / w.sum(), means=means, covs=covs)


@dataclass(frozen=True)
class ConditionalGmm:
    """Mixture over the unobserved feature block (indices into the full x)."""

    indices: np.ndarray
    weights: np.ndarray
    means: np.ndarray  # (K, |u|)
    covs: np.ndarray  # (K, |u|, |u|)

    @property
    def dim(self) -> int:
        return self.indices.size

    def log_pdf(self, x_u: np.ndarray) -> np.ndarray:
        """log p(x_u | x_o); x_u is (..., |u|) in the order of `indices`."""
        if self.dim == 0:
            return np.zeros(np.asarray(x_u).shape[:-1] if np.ndim(x_u) else ())
        comp = np.stack(
            [
                _mvn_log_pdf(x_u, self.means[c], _chol_with_jitter(self.covs[c]))
                for c in range(self.weights.shape[0])
            ],
            axis=-1,
        )
        logits = comp + np.log(self.weights)
        m = logits.max(axis=-1, keepdims=True)
        return (m + np.log(np.sum(np.exp(logits - m), axis=-1, keepdims=True)))[..., 0]

    def mean(self) -> np.ndarray:
        """Posterior mean E[x_u | x_o], the RMSE-optimal imputation."""
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        ks = rng.choice(self.weights.shape[0], size=n, p=self.weights)
        chols = np.stack([_chol_with_jitter(c) for c in self.covs])
        eps = rng.standard_normal((n, self.dim))
        return self.means[ks] + np.einsum("nij,nj->ni", chols[ks], eps)
