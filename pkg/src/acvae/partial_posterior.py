"""The partially observed posterior q(z | x_o) and its training.

A trunk network reads the zero-fill+bitmask encoding of x_o and feeds one of
three heads: a diagonal Gaussian, a full-covariance Gaussian parameterized by
a Cholesky factor, or an autoregressive mixture of Gaussians over the latent
coordinates. Output layers are zero-initialized so an untrained posterior is
exactly standard normal.

Training minimizes the negative log-density of a latent sample drawn from the
fully observed encoder, optionally jointly with the VAE's ELBO; the loss never
touches the decoder. Gradients into the VAE encoder can be cut by stopping
them on the latent sample, and a pretrained VAE can be frozen outright.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import ndgrad as ng
from .data import Dataset, augment_noise
from .distributions import (
    DiagGaussian,
    FullCovGaussian,
    MixtureOfGaussians1D,
    log_prob,
    mog1d_log_prob,
    reparam_sample,
    sample,
)
from .masking import (
    ObservationMask,
    PartialObservation,
    bernoulli_mask_matrix,
    encode_partial_batch,
    uniform_fraction_mask_matrix,
)
from .nets import MlpSpec, init_mlp, mlp_forward
from .vae import (
    OptimizerState,
    TrainConfig,
    VaeModel,
    adam_init,
    adam_step,
    beta_value,
    clamp_log_std,
    current_lr,
    elbo_expr,
    encoder_dist,
    minibatch,
)

SOFTPLUS_ONE = float(np.log(np.e - 1.0))  # softplus(x + this) = 1 at x = 0


# ---------------------------------------------------------------------------
# evaluation counting (cost-accounting instrumentation for tests/benchmarks)


@dataclass
class EvalCounter:
    po_rows: int = 0  # every partial-posterior row evaluated
    po_scoring_rows: int = 0  # rows with a hypothetically acquired feature
    lookahead_calls: int = 0


_COUNTERS: list[EvalCounter] = []


@contextmanager
def counting(counter: EvalCounter | None = None):
    counter = counter or EvalCounter()
    _COUNTERS.append(counter)
    try:
        yield counter
    finally:
        _COUNTERS.pop()


def count_po_rows(n: int, scoring: bool = False) -> None:
    if _COUNTERS:
        _COUNTERS[-1].po_rows += n
        if scoring:
            _COUNTERS[-1].po_scoring_rows += n


def count_lookahead_call() -> None:
    if _COUNTERS:
        _COUNTERS[-1].lookahead_calls += 1


# ---------------------------------------------------------------------------
# model


@dataclass(frozen=True)
class PoConfig:
    data_dim: int
    latent_dim: int
    head: str = "diag"  # diag | fullcov | ar
    hidden: int = 128
    n_blocks: int = 2
    layer_norm: bool = False
    cond_dim: int = 64  # conditioning vector width (ar head only)
    ar_hidden: int = 128
    ar_blocks: int = 2
    n_mixture: int = 10

    def trunk_spec(self) -> MlpSpec:
        lat = self.latent_dim
        if self.head == "diag":
            out = 2 * lat
        elif self.head == "fullcov":
            out = 2 * lat + lat * (lat - 1) // 2
        elif self.head == "ar":
            out = self.cond_dim
        else:
            raise ValueError(f"unknown head kind: {self.head!r}")
        return MlpSpec(2 * self.data_dim, self.hidden, self.n_blocks, out, self.layer_norm)

    def coord_spec(self) -> MlpSpec:
        # masked latent prefix + latent bitmask + conditioning vector in;
        # a mixture (logits, mean, log_std) per latent coordinate out
        return MlpSpec(
            2 * self.latent_dim + self.cond_dim,
            self.ar_hidden,
            self.ar_blocks,
            self.latent_dim * 3 * self.n_mixture,
            self.layer_norm,
        )


@dataclass(frozen=True)
class PartialEncoder:
    config: PoConfig
    params: ng.ParamSet

    def replace_params(self, params: ng.ParamSet) -> "PartialEncoder":
        return PartialEncoder(self.config, params)


def init_partial_encoder(
    config: PoConfig, rng: np.random.Generator, dtype=np.float64
) -> PartialEncoder:
    items = init_mlp(config.trunk_spec(), rng, "po", dtype, zero_output=True)
    if config.head == "ar":
        items += init_mlp(config.coord_spec(), rng, "po_ar", dtype, zero_output=True)
    return PartialEncoder(config, ng.ParamSet(items))


def _head_from_trunk(trunk_out, config: PoConfig):
    lat = config.latent_dim
    if config.head == "diag":
        return DiagGaussian(
            mean=trunk_out[..., :lat], log_std=clamp_log_std(trunk_out[..., lat:])
        )
    if config.head == "fullcov":
        mean = trunk_out[..., :lat]
        raw_diag = trunk_out[..., lat : 2 * lat]
        off = trunk_out[..., 2 * lat :]
        diag = ng.softplus(ng.add(raw_diag, SOFTPLUS_ONE))
        chol = ng.add(ng.diag_embed(diag), ng.scatter_tril(off, lat))
        return FullCovGaussian(mean=mean, chol_lower=chol)
    raise ValueError(f"head {config.head!r} has no closed-form distribution object")


def trunk_expr(params, enc_obs, config: PoConfig):
    return mlp_forward(params, "po", enc_obs, config.trunk_spec())


def posterior_log_prob_expr(params, enc_obs: np.ndarray, z, config: PoConfig):
    """Differentiable log q(z | x_o) per batch row.

    `enc_obs` is the constant (n, 2d) partial-observation encoding; `z` may
    be a Node so gradients can flow back into whatever produced the sample.
    """
    trunk_out = trunk_expr(params, enc_obs, config)
    if config.head in ("diag", "fullcov"):
        return log_prob(_head_from_trunk(trunk_out, config), z)
    return _ar_log_prob_expr(params, trunk_out, z, config)


def _ar_coord_mixture(params, cond, z_masked, coord_mask, config: PoConfig, i: int):
    """Mixture parameters for latent coordinate i given the visible prefix."""
    n = ng.value_of(cond).shape[0]
    mask_tiled = np.broadcast_to(coord_mask, (n, config.latent_dim))
    inp = ng.concat([z_masked, mask_tiled, cond], axis=-1)
    out = mlp_forward(params, "po_ar", inp, config.coord_spec())
    out = ng.reshape(out, (n, config.latent_dim, 3, config.n_mixture))
    logits = out[:, i, 0, :]
    means = out[:, i, 1, :]
    log_stds = clamp_log_std(out[:, i, 2, :])
    log_w = ng.sub(logits, ng.logsumexp(logits, axis=-1, keepdims=True))
    return MixtureOfGaussians1D(log_weights=log_w, means=means, log_stds=log_stds)


def _ar_log_prob_expr(params, cond, z, config: PoConfig):
    lat = config.latent_dim
    total = None
    for i in range(lat):
        prefix_mask = np.zeros(lat)
        prefix_mask[:i] = 1.0
        z_masked = ng.mul(z, prefix_mask)
        mix = _ar_coord_mixture(params, cond, z_masked, prefix_mask, config, i)
        term = mog1d_log_prob(mix, z[:, i] if isinstance(z, ng.Node) else np.asarray(z)[:, i])
        total = term if total is None else ng.add(total, term)
    return total


# ---------------------------------------------------------------------------
# inference-side posterior objects


@dataclass(frozen=True)
class ArMixturePosterior:
    """Autoregressive mixture over latent coordinates for fixed x_o rows.

    log_prob evaluates every coordinate term from the same conditioning
    vector (the per-coordinate passes are independent); sampling is strictly
    sequential in the coordinate index.
    """

    encoder: PartialEncoder
    cond: np.ndarray  # (n, cond_dim)

    @property
    def n(self) -> int:
        return self.cond.shape[0]

    def log_prob(self, z: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(z)
        cfg = self.encoder.config
        cond = self.cond
        if cond.shape[0] == 1 and z.shape[0] > 1:
            cond = np.broadcast_to(cond, (z.shape[0], cond.shape[1]))
        leaves = {k: ng.Node(v) for k, v in self.encoder.params.items()}
        return ng.value_of(_ar_log_prob_expr(leaves, cond, z, cfg))

    def sample(self, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
        cfg = self.encoder.config
        rows = self.n if n is None else n
        cond = self.cond
        if cond.shape[0] == 1 and rows > 1:
            cond = np.broadcast_to(cond, (rows, cond.shape[1]))
        elif cond.shape[0] != rows:
            raise ValueError(f"cannot draw {rows} samples from {self.n} conditioning rows")
        leaves = {k: ng.Node(v) for k, v in self.encoder.params.items()}
        z = np.zeros((rows, cfg.latent_dim))
        for i in range(cfg.latent_dim):
            prefix_mask = np.zeros(cfg.latent_dim)
            prefix_mask[:i] = 1.0
            mix = _ar_coord_mixture(leaves, cond, z * prefix_mask, prefix_mask, cfg, i)
            mix = MixtureOfGaussians1D(
                log_weights=ng.value_of(mix.log_weights),
                means=ng.value_of(mix.means),
                log_stds=ng.value_of(mix.log_stds),
            )
            z = z.copy()
            z[:, i] = sample(mix, rng)
        return z


def posterior_batch(
    po: PartialEncoder, values: np.ndarray, bits: np.ndarray, scoring: bool = False
):
    """q(z | x_o) for a batch of partial observations, numpy-valued.

    `scoring` marks candidate-evaluation calls for the cost-accounting
    instrumentation (greedy acquisition's k*|u| lookahead-context rows).
    """
    enc = encode_partial_batch(np.atleast_2d(values), np.atleast_2d(bits))
    count_po_rows(enc.shape[0], scoring=scoring)
    leaves = {k: ng.Node(v) for k, v in po.params.items()}
    trunk_out = ng.value_of(trunk_expr(leaves, enc, po.config))
    if po.config.head == "ar":
        return ArMixturePosterior(encoder=po, cond=trunk_out)
    dist = _head_from_trunk(ng.Node(trunk_out), po.config)
    if isinstance(dist, DiagGaussian):
        return DiagGaussian(mean=ng.value_of(dist.mean), log_std=ng.value_of(dist.log_std))
    return FullCovGaussian(
        mean=ng.value_of(dist.mean), chol_lower=ng.value_of(dist.chol_lower)
    )


def posterior(po: PartialEncoder, p: PartialObservation):
    """q(z | x_o) for a single partial observation."""
    dist = posterior_batch(po, p.values[None, :], p.mask.bits[None, :])
    if isinstance(dist, DiagGaussian):
        return DiagGaussian(mean=dist.mean[0], log_std=dist.log_std[0])
    if isinstance(dist, FullCovGaussian):
        return FullCovGaussian(mean=dist.mean[0], chol_lower=dist.chol_lower[0])
    return dist


def posterior_sample(dist, rng: np.random.Generator, n: int) -> np.ndarray:
    """n latent draws from any posterior object this module produces."""
    if isinstance(dist, ArMixturePosterior):
        return dist.sample(rng, n)
    return sample(dist, rng, n=n)


def posterior_log_prob(dist, z: np.ndarray) -> np.ndarray:
    if isinstance(dist, ArMixturePosterior):
        return dist.log_prob(z)
    return np.asarray(log_prob(dist, z))


def ar_log_prob(po: PartialEncoder, p: PartialObservation, z: np.ndarray) -> np.ndarray:
    """log q(z | x_o) under the autoregressive head."""
    if po.config.head != "ar":
        raise ValueError(f"ar_log_prob requires the ar head, got {po.config.head!r}")
    return posterior(po, p).log_prob(z)


def ar_sample(
    po: PartialEncoder, p: PartialObservation, rng: np.random.Generator, n: int = 1
) -> np.ndarray:
    """Sequential latent sampling under the autoregressive head."""
    if po.config.head != "ar":
        raise ValueError(f"ar_sample requires the ar head, got {po.config.head!r}")
    return posterior(po, p).sample(rng, n)


# ---------------------------------------------------------------------------
# the matching loss


@dataclass(frozen=True)
class PmMode:
    """Training-mode flags: freezing the VAE implies stopping gradients on z."""

    stop_gradient_on_z: bool = True
    freeze_vae: bool = False
    joint_elbo_weight: float = 1.0

    def __post_init__(self):
        if self.freeze_vae and not self.stop_gradient_on_z:
            raise ValueError("freeze_vae requires stop_gradient_on_z")
        if self.joint_elbo_weight < 0:
            raise ValueError("joint_elbo_weight must be >= 0")


def match_loss_expr(params, x, bits, noise, vae_model: VaeModel, po_config: PoConfig, mode: PmMode):
    """Mean over the batch of -log q(z | x_o), z from the full encoder.

    In frozen mode the encoder runs outside the graph, so only the partial
    encoder's parameters receive gradients.
    """
    enc_obs = encode_partial_batch(x, bits)
    if mode.freeze_vae:
        leaves = {k: ng.Node(v) for k, v in vae_model.params.items()}
        q = encoder_dist(leaves, x, vae_model.config)
        z = ng.value_of(reparam_sample(q, noise))
    else:
        q = encoder_dist(params, x, vae_model.config)
        z = reparam_sample(q, noise)
        if mode.stop_gradient_on_z:
            z = ng.stop_gradient(z)
    logq = posterior_log_prob_expr(params, enc_obs, z, po_config)
    return ng.neg(ng.vmean(logq))


def match_loss(
    x: np.ndarray,
    mask: ObservationMask | np.ndarray,
    vae_model: VaeModel,
    po: PartialEncoder,
    mode: PmMode,
    rng: np.random.Generator,
) -> float:
    """Single-sample matching loss for a batch (or one instance) of x."""
    x = np.atleast_2d(x)
    bits = mask.bits if isinstance(mask, ObservationMask) else np.asarray(mask, dtype=bool)
    bits = np.broadcast_to(np.atleast_2d(bits), x.shape)
    noise = rng.standard_normal((x.shape[0], vae_model.config.latent_dim))
    params = (
        po.params if mode.freeze_vae else ng.merge_params(vae_model.params, po.params)
    )
    g = ng.Graph(
        lambda p: match_loss_expr(p, x, bits, noise, vae_model, po.config, mode), "pm"
    )
    val = float(ng.evaluate(g, params))
    if not np.isfinite(val):
        raise ng.NumericalError("matching loss is non-finite")
    return val


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class MaskSampler:
    """Per-instance training mask distribution."""

    kind: str = "bernoulli"  # bernoulli | uniform_fraction
    p: float = 0.5
    lo: float = 0.0
    hi: float = 0.2

    def matrix(self, n: int, d: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "bernoulli":
            return bernoulli_mask_matrix(n, d, self.p, rng)
        if self.kind == "uniform_fraction":
            return uniform_fraction_mask_matrix(n, d, self.lo, self.hi, rng)
        raise ValueError(f"unknown mask sampler kind: {self.kind!r}")


@dataclass(frozen=True)
class PmTrainResult:
    po: PartialEncoder
    vae: VaeModel
    opt_state: OptimizerState
    metrics: list[dict]
    seed: int
    step: int
    diverged_at: int | None = None


def train_pm(
    dataset: Dataset,
    vae_model: VaeModel,
    po_config: PoConfig,
    mode: PmMode,
    cfg: TrainConfig,
    mask_sampler: MaskSampler | None = None,
    dtype=np.float64,
) -> PmTrainResult:
    """Fit the partial encoder; jointly updates the VAE unless frozen.

    Each step samples a minibatch, one mask per instance, and a single latent
    noise draw shared by the ELBO and matching terms.
    """
    if dataset.n == 0:
        raise ValueError("cannot train on an empty dataset")
    mask_sampler = mask_sampler or MaskSampler()
    rng = np.random.default_rng(cfg.seed)
    po = init_partial_encoder(po_config, rng, dtype)
    vae_cfg = vae_model.config
    frozen = mode.freeze_vae

    params = po.params if frozen else ng.merge_params(vae_model.params, po.params)
    state = adam_init(params, cfg.lr, cfg.lr_decay_rate, cfg.lr_decay_every)
    metrics: list[dict] = []

    # fixed probe batch with common random numbers, so the logged matching
    # loss tracks the expected loss instead of per-batch sampling noise
    probe_rng = np.random.default_rng((cfg.seed, 0x9E3779B9))
    probe_x = dataset.x[: min(512, dataset.n)].astype(dtype)
    probe_bits = mask_sampler.matrix(probe_x.shape[0], vae_cfg.data_dim, probe_rng)
    probe_noise = probe_rng.standard_normal(
        (probe_x.shape[0], vae_cfg.latent_dim)
    ).astype(dtype)

    def step_graph(batch, bits, noise, beta):
        def fn(p):
            pm = match_loss_expr(p, batch, bits, noise, vae_model, po_config, mode)
            if frozen or mode.joint_elbo_weight == 0.0:
                return pm
            elbo_loss, _, _ = elbo_expr(p, batch, noise, beta, vae_cfg)
            return ng.add(pm, ng.mul(elbo_loss, mode.joint_elbo_weight))

        return ng.Graph(fn, "pm_step")

    last_good = params
    for step in range(cfg.steps):
        batch = minibatch(dataset, cfg.batch_size, rng).astype(dtype)
        batch = augment_noise(batch, cfg.noise_sigma, rng).astype(dtype)
        bits = mask_sampler.matrix(batch.shape[0], vae_cfg.data_dim, rng)
        noise = rng.standard_normal((batch.shape[0], vae_cfg.latent_dim)).astype(dtype)
        beta = beta_value(cfg.beta, step)
        graph = step_graph(batch, bits, noise, beta)
        try:
            loss, grads = ng.value_and_gradient(graph, params)
            if not np.isfinite(loss):
                raise ng.NumericalError("loss is non-finite")
            last_good = params
            params, state = adam_step(params, grads, state)
        except ng.NumericalError:
            params = last_good
            return PmTrainResult(
                po.replace_params(_po_subset(params, po)),
                vae_model if frozen else vae_model.replace_params(_vae_subset(params, vae_model)),
                state,
                metrics,
                cfg.seed,
                step,
                step,
            )
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            pm_graph = ng.Graph(
                lambda p: match_loss_expr(
                    p, probe_x, probe_bits, probe_noise, vae_model, po_config, mode
                )
            )
            metrics.append(
                {
                    "step": step,
                    "loss": float(loss),
                    "pm": float(ng.evaluate(pm_graph, params)),
                    "beta": float(beta),
                    "lr": current_lr(state),
                }
            )
    return PmTrainResult(
        po.replace_params(_po_subset(params, po)),
        vae_model if frozen else vae_model.replace_params(_vae_subset(params, vae_model)),
        state,
        metrics,
        cfg.seed,
        cfg.steps,
    )


def _po_subset(params: ng.ParamSet, po: PartialEncoder) -> ng.ParamSet:
    return ng.ParamSet([(k, params[k]) for k in po.params.names()])


def _vae_subset(params: ng.ParamSet, vae_model: VaeModel) -> ng.ParamSet:
    return ng.ParamSet(
        [(k, params[k] if k in params else vae_model.params[k]) for k in vae_model.params.names()]
    )
