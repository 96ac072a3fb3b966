"""Shared fixtures: toy mixture data and models trained once per session."""

import numpy as np
import pytest

from acvae.acquisition import LookaheadConfig, train_lookahead
from acvae.data import Dataset, GmmSpec, gen_gmm
from acvae.gmm_oracle import GmmOracle
from acvae.partial_posterior import MaskSampler, PmMode, PoConfig, train_pm
from acvae.vae import TrainConfig, VaeConfig, init_vae


def block_correlated_oracle(d: int, block: int, corr: float, rng: np.random.Generator,
                            n_components: int = 3, separation: float = 5.0) -> GmmOracle:
    """Mixture whose features correlate strongly within consecutive blocks,
    so observing one feature per block is far more informative than several
    from the same block."""
    base = np.eye(d)
    for start in range(0, d, block):
        for i in range(start, min(start + block, d)):
            for j in range(start, min(start + block, d)):
                if i != j:
                    base[i, j] = corr
    means = rng.standard_normal((n_components, d))
    means -= means.mean(axis=0)
    dists = [
        np.linalg.norm(means[i] - means[j])
        for i in range(n_components)
        for j in range(i + 1, n_components)
    ]
    means *= separation / min(dists)
    scales = rng.uniform(0.7, 1.3, size=(n_components, d))
    covs = np.stack([np.outer(s, s) * base for s in scales])
    return GmmOracle(
        weights=np.full(n_components, 1.0 / n_components), means=means, covs=covs
    )


@pytest.fixture(scope="session")
def two_cluster():
    """Labeled 2-component GMM in 2-D with its exact oracle and a test split."""
    rng = np.random.default_rng(1000)
    ds, oracle = gen_gmm(
        GmmSpec(n_components=2, dim=2, n_samples=6000, separation=5.0), rng
    )
    test_x, test_labels = oracle.sample(1500, rng)
    return {"train": ds, "oracle": oracle, "test_x": test_x, "test_labels": test_labels}


@pytest.fixture(scope="session")
def pm_diag(two_cluster):
    """VAE + diagonal-head partial encoder, trained jointly on the toy."""
    vae_cfg = VaeConfig(data_dim=2, latent_dim=2, hidden=48, n_blocks=1)
    model = init_vae(vae_cfg, np.random.default_rng(7))
    po_cfg = PoConfig(data_dim=2, latent_dim=2, head="diag", hidden=96, n_blocks=1)
    mode = PmMode(stop_gradient_on_z=True, freeze_vae=False, joint_elbo_weight=1.0)
    result = train_pm(
        two_cluster["train"],
        model,
        po_cfg,
        mode,
        TrainConfig(steps=9000, batch_size=128, lr=1e-3, noise_sigma=1e-3, seed=3,
                    log_every=50),
        MaskSampler(kind="bernoulli", p=0.5),
    )
    assert result.diverged_at is None
    return result


@pytest.fixture(scope="session")
def pm_ar(two_cluster):
    """VAE + autoregressive-head partial encoder (multimodal posteriors)."""
    vae_cfg = VaeConfig(data_dim=2, latent_dim=2, hidden=48, n_blocks=1)
    model = init_vae(vae_cfg, np.random.default_rng(8))
    po_cfg = PoConfig(
        data_dim=2,
        latent_dim=2,
        head="ar",
        hidden=48,
        n_blocks=1,
        cond_dim=32,
        ar_hidden=48,
        ar_blocks=1,
        n_mixture=5,
    )
    mode = PmMode(stop_gradient_on_z=True, freeze_vae=False, joint_elbo_weight=1.0)
    result = train_pm(
        two_cluster["train"],
        model,
        po_cfg,
        mode,
        TrainConfig(steps=6000, batch_size=128, lr=1e-3, noise_sigma=1e-3, seed=4),
        MaskSampler(kind="bernoulli", p=0.5),
    )
    assert result.diverged_at is None
    return result


@pytest.fixture(scope="session")
def vade_models():
    """Mixture-prior model plus a frozen-mode autoregressive partial encoder
    on a labeled 4-cluster mixture (the partially observed clustering bench)."""
    from acvae.clustering import train_vade
    from acvae.vae import BetaSchedule

    rng = np.random.default_rng(3000)
    ds, oracle = gen_gmm(
        GmmSpec(n_components=4, dim=10, n_samples=8000, separation=6.0), rng
    )
    test_x, test_labels = oracle.sample(800, rng)
    cfg = VaeConfig(
        data_dim=10, latent_dim=3, hidden=64, n_blocks=1, prior="gmm",
        n_prior_components=4,
    )
    vade = train_vade(
        ds,
        cfg,
        TrainConfig(
            steps=8000, batch_size=128, lr=1e-3, seed=11,
            beta=BetaSchedule(kind="monotonic", delay_steps=1000, period=4000),
        ),
    )
    assert vade.diverged_at is None
    po_cfg = PoConfig(
        data_dim=10, latent_dim=3, head="ar", hidden=64, n_blocks=1,
        cond_dim=32, ar_hidden=64, ar_blocks=1, n_mixture=5,
    )
    pm = train_pm(
        ds,
        vade.model,
        po_cfg,
        PmMode(stop_gradient_on_z=True, freeze_vae=True),
        TrainConfig(steps=6000, batch_size=128, lr=1e-3, seed=12),
        MaskSampler(kind="uniform_fraction", lo=0.0, hi=1.0),
    )
    assert pm.diverged_at is None
    return {
        "oracle": oracle,
        "train": ds,
        "test_x": test_x,
        "test_labels": test_labels,
        "vade": vade.model,
        "po": pm.po,
    }


@pytest.fixture(scope="session")
def acq_models():
    """Full-covariance partial posterior plus lookahead net on a correlated
    8-feature mixture (the acquisition test bench)."""
    rng = np.random.default_rng(2000)
    oracle = block_correlated_oracle(d=8, block=2, corr=0.9, rng=rng)
    xs, labels = oracle.sample(8000, rng)
    ds = Dataset(x=xs, labels=labels)
    test_x, _ = oracle.sample(400, rng)

    vae_cfg = VaeConfig(data_dim=8, latent_dim=4, hidden=64, n_blocks=1)
    model = init_vae(vae_cfg, np.random.default_rng(20))
    po_cfg = PoConfig(data_dim=8, latent_dim=4, head="fullcov", hidden=64, n_blocks=1)
    mode = PmMode(stop_gradient_on_z=True, freeze_vae=False, joint_elbo_weight=1.0)
    pm = train_pm(
        ds,
        model,
        po_cfg,
        mode,
        TrainConfig(steps=7000, batch_size=128, lr=1e-3, noise_sigma=1e-3, seed=5),
        MaskSampler(kind="uniform_fraction", lo=0.0, hi=0.6),
    )
    assert pm.diverged_at is None

    la_cfg = LookaheadConfig(data_dim=8, latent_dim=4, hidden=64, n_blocks=1)
    la = train_lookahead(
        ds,
        pm.vae,
        pm.po,
        la_cfg,
        TrainConfig(steps=2500, batch_size=48, lr=1e-3, seed=6),
        k=16,
        subsample_m=8,
        mask_sampler=MaskSampler(kind="uniform_fraction", lo=0.0, hi=0.6),
    )
    assert la.diverged_at is None
    return {
        "oracle": oracle,
        "train": ds,
        "test_x": test_x,
        "vae": pm.vae,
        "po": pm.po,
        "la": la.lookahead,
    }
