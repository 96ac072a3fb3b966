"""Distribution math against analytic values, explicit linear-algebra
re-computations, and Monte-Carlo estimates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from acvae import ndgrad as ng
from acvae.distributions import (
    BernoulliVector,
    DiagGaussian,
    FullCovGaussian,
    GmmPrior,
    MixtureOfGaussians1D,
    entropy,
    gmm_component_posterior,
    kl_diag,
    log_prob,
    reparam_sample,
    sample,
)

LOG_2PI = np.log(2 * np.pi)


def std_normal(d):
    return DiagGaussian(mean=np.zeros(d), log_std=np.zeros(d))


# ---------------------------------------------------------------------------
# log_prob


def test_standard_normal_at_zero():
    assert np.isclose(log_prob(std_normal(1), np.zeros(1)), -0.5 * LOG_2PI)
    assert np.isclose(float(-0.5 * LOG_2PI), -0.91894, atol=1e-5)


def test_bernoulli_logit_zero():
    dist = BernoulliVector(logits=np.zeros(1))
    assert np.isclose(log_prob(dist, np.ones(1)), np.log(0.5))
    assert np.isclose(log_prob(dist, np.zeros(1)), np.log(0.5))


def test_full_cov_matches_explicit_inverse():
    l_mat = np.array([[1.0, 0.0], [0.5, 1.0]])
    mean = np.array([0.3, -0.2])
    dist = FullCovGaussian(mean=mean, chol_lower=l_mat)
    x = np.array([0.9, 0.1])
    # independent oracle: explicit determinant and inverse
    cov = l_mat @ l_mat.T
    diff = x - mean
    want = -0.5 * (
        diff @ np.linalg.inv(cov) @ diff + np.log(np.linalg.det(cov)) + 2 * LOG_2PI
    )
    assert np.isclose(log_prob(dist, x), want, atol=1e-12)
    # at the mean the quadratic term vanishes
    at_mean = log_prob(dist, mean)
    assert np.isclose(at_mean, -0.5 * (np.log(np.linalg.det(cov)) + 2 * LOG_2PI))


def test_log_prob_dimension_mismatch():
    with pytest.raises(ng.ShapeError, match="dimension"):
        log_prob(std_normal(2), np.zeros(3))


def test_mog1d_single_component_reduces_to_gaussian():
    dist = MixtureOfGaussians1D(
        log_weights=np.zeros((1,)), means=np.zeros((1,)), log_stds=np.zeros((1,))
    )
    assert np.isclose(log_prob(dist, np.array(0.0)), -0.5 * LOG_2PI)


def test_log_prob_integrates_to_one_importance():
    # MC integral of the density over a wide proposal, 1D and 2D
    rng = np.random.default_rng(0)
    n = 400_000
    dist1 = DiagGaussian(mean=np.array([0.4]), log_std=np.array([-0.3]))
    xs = rng.uniform(-8, 8, size=(n, 1))
    est = np.mean(np.exp(log_prob(dist1, xs))) * 16.0
    assert abs(est - 1.0) < 0.01

    l_mat = np.array([[1.0, 0.0], [0.6, 0.8]])
    dist2 = FullCovGaussian(mean=np.zeros(2), chol_lower=l_mat)
    xs2 = rng.uniform(-7, 7, size=(n, 2))
    est2 = np.mean(np.exp(log_prob(dist2, xs2))) * 14.0**2
    assert abs(est2 - 1.0) < 0.01


# ---------------------------------------------------------------------------
# reparam_sample


def test_reparam_zero_noise_is_mean():
    dist = DiagGaussian(mean=np.array([1.0, -2.0]), log_std=np.array([0.3, 0.1]))
    assert np.array_equal(reparam_sample(dist, np.zeros(2)), dist.mean)
    fc = FullCovGaussian(mean=np.array([1.0, 2.0]), chol_lower=np.eye(2))
    assert np.allclose(reparam_sample(fc, np.zeros(2)), fc.mean)


def test_reparam_unit_noise_adds_std():
    dist = DiagGaussian(mean=np.array([1.0, 2.0]), log_std=np.log([0.5, 2.0]))
    assert np.allclose(reparam_sample(dist, np.ones(2)), [1.5, 4.0])


def test_reparam_sample_moments():
    rng = np.random.default_rng(42)
    n = 100_000
    l_mat = np.array([[1.2, 0.0], [-0.7, 0.5]])
    mean = np.array([0.5, -1.0])
    dist = FullCovGaussian(mean=mean, chol_lower=l_mat)
    zs = ng.value_of(reparam_sample(dist, rng.standard_normal((n, 2))))
    cov = l_mat @ l_mat.T
    se_mean = np.sqrt(np.diag(cov) / n)
    assert np.all(np.abs(zs.mean(axis=0) - mean) < 3 * se_mean)
    emp_cov = np.cov(zs.T)
    # moment SEs for Gaussian covariance entries ~ sqrt((c_ii c_jj + c_ij^2)/n)
    for i in range(2):
        for j in range(2):
            se = np.sqrt((cov[i, i] * cov[j, j] + cov[i, j] ** 2) / n)
            assert abs(emp_cov[i, j] - cov[i, j]) < 3 * se


def test_reparam_sample_differentiable():
    noise = np.array([0.7, -0.2])

    def fn(p):
        dist = DiagGaussian(mean=p["m"], log_std=p["s"])
        z = reparam_sample(dist, noise)
        return ng.vsum(ng.mul(z, z))

    params = ng.ParamSet([("m", np.array([0.1, 0.4])), ("s", np.array([-0.2, 0.3]))])
    assert ng.grad_check(ng.Graph(fn), params, eps=1e-6) < 1e-6


# ---------------------------------------------------------------------------
# kl_diag


def test_kl_identical_zero():
    d = DiagGaussian(mean=np.array([0.3, -1.0]), log_std=np.array([0.2, -0.5]))
    assert np.isclose(kl_diag(d, d), 0.0, atol=1e-12)


def test_kl_unit_mean_shift():
    p = DiagGaussian(mean=np.ones(1), log_std=np.zeros(1))
    q = std_normal(1)
    assert np.isclose(kl_diag(p, q), 0.5)


def test_kl_matches_monte_carlo():
    rng = np.random.default_rng(1)
    p = DiagGaussian(mean=np.array([0.5, -0.3]), log_std=np.array([0.1, -0.4]))
    q = DiagGaussian(mean=np.array([-0.2, 0.1]), log_std=np.array([-0.1, 0.3]))
    n = 1_000_000
    zs = ng.value_of(reparam_sample(p, rng.standard_normal((n, 2))))
    diffs = np.asarray(log_prob(p, zs)) - np.asarray(log_prob(q, zs))
    se = diffs.std(ddof=1) / np.sqrt(n)
    assert abs(diffs.mean() - float(kl_diag(p, q))) < 3 * se


@settings(max_examples=50, deadline=None)
@given(
    m1=st.floats(-3, 3),
    m2=st.floats(-3, 3),
    s1=st.floats(-1.5, 1.5),
    s2=st.floats(-1.5, 1.5),
)
def test_kl_nonneg_property(m1, m2, s1, s2):
    p = DiagGaussian(mean=np.array([m1]), log_std=np.array([s1]))
    q = DiagGaussian(mean=np.array([m2]), log_std=np.array([s2]))
    kl = float(kl_diag(p, q))
    assert kl >= -1e-12
    if m1 == m2 and s1 == s2:
        assert abs(kl) < 1e-12


# ---------------------------------------------------------------------------
# entropy


def test_entropy_identity_2d():
    assert np.isclose(entropy(std_normal(2)), LOG_2PI + 1.0)
    assert np.isclose(LOG_2PI + 1.0, 2.83788, atol=1e-5)


def test_entropy_scaling_shift():
    d = 3
    base = std_normal(d)
    scaled = DiagGaussian(mean=np.zeros(d), log_std=np.ones(d))
    assert np.isclose(float(entropy(scaled)) - float(entropy(base)), d)


def test_entropy_full_cov_monte_carlo():
    rng = np.random.default_rng(3)
    l_mat = np.array([[2.0, 0.0], [1.0, 1.0]])
    dist = FullCovGaussian(mean=np.zeros(2), chol_lower=l_mat)
    n = 200_000
    zs = ng.value_of(reparam_sample(dist, rng.standard_normal((n, 2))))
    lps = np.asarray(log_prob(dist, zs))
    se = lps.std(ddof=1) / np.sqrt(n)
    assert abs(-lps.mean() - float(entropy(dist))) < 3 * se


def test_entropy_rotation_invariant():
    # entropy depends on det(C) only; compare two factors with equal determinant
    l1 = np.array([[2.0, 0.0], [1.0, 1.0]])
    cov = l1 @ l1.T
    theta = 0.7
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    l2 = np.linalg.cholesky(rot @ cov @ rot.T)
    a = entropy(FullCovGaussian(mean=np.zeros(2), chol_lower=l1))
    b = entropy(FullCovGaussian(mean=np.zeros(2), chol_lower=l2))
    assert np.isclose(float(a), float(b), atol=1e-10)


# ---------------------------------------------------------------------------
# gmm_component_posterior


def test_component_posterior_single():
    prior = GmmPrior(weights=np.ones(1), means=np.zeros((1, 2)), log_stds=np.zeros((1, 2)))
    assert np.allclose(gmm_component_posterior(np.zeros(2), prior), [1.0])


def test_component_posterior_symmetric_midpoint():
    prior = GmmPrior(
        weights=np.array([0.5, 0.5]),
        means=np.array([[-1.0], [1.0]]),
        log_stds=np.zeros((2, 1)),
    )
    assert np.allclose(gmm_component_posterior(np.zeros(1), prior), [0.5, 0.5])


def test_component_posterior_extended_precision_oracle():
    rng = np.random.default_rng(5)
    k, d = 4, 3
    w = rng.dirichlet(np.ones(k))
    mu = rng.standard_normal((k, d))
    ls = rng.standard_normal((k, d)) * 0.3
    prior = GmmPrior(weights=w, means=mu, log_stds=ls)
    z = rng.standard_normal(d)
    got = np.asarray(gmm_component_posterior(z, prior))

    # direct unnormalized computation in extended precision (float128 / mpmath-free)
    wl = w.astype(np.longdouble)
    dens = np.zeros(k, dtype=np.longdouble)
    for c in range(k):
        s = np.exp(np.longdouble(ls[c]))
        dens[c] = wl[c] * np.prod(
            np.exp(-0.5 * ((z - mu[c]) / s) ** 2) / (s * np.sqrt(2 * np.pi))
        )
    want = (dens / dens.sum()).astype(np.float64)
    assert np.allclose(got, want, atol=1e-12)


def test_component_posterior_far_z_no_nan():
    prior = GmmPrior(
        weights=np.array([0.5, 0.5]),
        means=np.array([[-1.0, 0.0], [1.0, 0.0]]),
        log_stds=np.zeros((2, 2)),
    )
    z = np.array([1e4, -1e4])
    post = np.asarray(gmm_component_posterior(z, prior))
    assert np.all(np.isfinite(post))
    assert np.isclose(post.sum(), 1.0, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.1, 100.0))
def test_component_posterior_simplex_property(seed, scale):
    rng = np.random.default_rng(seed)
    k = int(rng.integers(1, 6))
    prior = GmmPrior(
        weights=rng.dirichlet(np.ones(k)),
        means=rng.standard_normal((k, 2)),
        log_stds=rng.standard_normal((k, 2)) * 0.5,
    )
    z = rng.standard_normal(2) * scale
    post = np.asarray(gmm_component_posterior(z, prior))
    assert np.all(np.isfinite(post))
    assert np.all(post >= 0)
    assert abs(post.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# plain sampling helpers


def test_sample_deterministic_under_seed():
    dist = GmmPrior(
        weights=np.array([0.3, 0.7]),
        means=np.array([[0.0], [5.0]]),
        log_stds=np.zeros((2, 1)),
    )
    a = sample(dist, np.random.default_rng(9), n=10)
    b = sample(dist, np.random.default_rng(9), n=10)
    assert np.array_equal(a, b)


def test_mog1d_sampling_matches_density():
    rng = np.random.default_rng(11)
    dist = MixtureOfGaussians1D(
        log_weights=np.log([0.3, 0.7]),
        means=np.array([-2.0, 1.5]),
        log_stds=np.log([0.5, 1.0]),
    )
    xs = sample(dist, rng, n=200_000)
    hist, edges = np.histogram(xs, bins=80, range=(-6, 6), density=True)
    centers = 0.5 * (edges[1:] + edges[:-1])
    dens = np.exp(np.asarray(log_prob(dist, centers)))
    assert np.max(np.abs(hist - dens)) < 0.02
