"""Greedy active feature acquisition.

Two selection rules over the unobserved set: the sampling rule scores each
candidate feature by the average entropy of the partial posterior after
hypothetically observing it (k posterior evaluations per candidate, so a
step costs k * |u| evaluations), and the lookahead rule reads all d
post-acquisition entropies off one shared network in a single forward pass.
The lookahead network is trained against samples produced by the frozen
VAE + partial encoder, so its gradients touch nothing else.

Episodes reveal true feature values one at a time, impute after every
acquisition, and record the wall-clock of each selection.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import ndgrad as ng
from .data import Dataset
from .distributions import BernoulliVector, DiagGaussian, entropy, log_prob
from .masking import ObservationMask, PartialObservation, encode_partial_batch
from .nets import MlpSpec, init_mlp, mlp_forward
from .partial_posterior import (
    MaskSampler,
    PartialEncoder,
    count_lookahead_call,
    posterior_batch,
    posterior_sample,
)
from .vae import (
    OptimizerState,
    TrainConfig,
    VaeModel,
    adam_init,
    adam_step,
    clamp_log_std,
    current_lr,
    decode,
    decoder_mean,
    minibatch,
)

ENTROPY_CONST = 0.5 * (np.log(2.0 * np.pi) + 1.0)


# ---------------------------------------------------------------------------
# lookahead network


@dataclass(frozen=True)
class LookaheadConfig:
    data_dim: int
    latent_dim: int
    hidden: int = 128
    n_blocks: int = 2
    layer_norm: bool = False

    def trunk_spec(self) -> MlpSpec:
        return MlpSpec(
            2 * self.data_dim,
            self.hidden,
            self.n_blocks,
            self.data_dim * 2 * self.latent_dim,
            self.layer_norm,
        )


@dataclass(frozen=True)
class LookaheadNet:
    """One shared trunk emitting a diagonal Gaussian per feature."""

    config: LookaheadConfig
    params: ng.ParamSet

    def replace_params(self, params: ng.ParamSet) -> "LookaheadNet":
        return LookaheadNet(self.config, params)


def init_lookahead(
    config: LookaheadConfig, rng: np.random.Generator, dtype=np.float64
) -> LookaheadNet:
    return LookaheadNet(
        config, ng.ParamSet(init_mlp(config.trunk_spec(), rng, "la", dtype, zero_output=True))
    )


def lookahead_heads_expr(params, enc_obs, config: LookaheadConfig):
    """(n, d, 2, latent) head parameters: [:, i, 0] means, [:, i, 1] log-stds."""
    out = mlp_forward(params, "la", enc_obs, config.trunk_spec())
    n = ng.value_of(out).shape[0]
    out = ng.reshape(out, (n, config.data_dim, 2, config.latent_dim))
    return out


def lookahead_entropies(la: LookaheadNet, values: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Per-feature posterior entropies from one trunk evaluation, (n, d)."""
    enc = encode_partial_batch(np.atleast_2d(values), np.atleast_2d(bits))
    count_lookahead_call()
    leaves = {k: ng.Node(v) for k, v in la.params.items()}
    heads = ng.value_of(lookahead_heads_expr(leaves, enc, la.config))
    log_stds = ng.value_of(clamp_log_std(heads[:, :, 1, :]))
    return log_stds.sum(axis=-1) + la.config.latent_dim * ENTROPY_CONST


# ---------------------------------------------------------------------------
# sampling-based scoring


def _posterior_entropies(dist) -> np.ndarray:
    if isinstance(dist, DiagGaussian) or hasattr(dist, "chol_lower"):
        return np.asarray(ng.value_of(entropy(dist)))
    raise ValueError("sampling-based acquisition needs a Gaussian posterior head")


def _sample_decoder_features(model: VaeModel, zs: np.ndarray, rng: np.random.Generator):
    """One sampled value per feature per latent draw, (n, d)."""
    dec = decode(model, zs)
    if isinstance(dec, BernoulliVector):
        p = ng.value_of(ng.sigmoid(dec.logits))
        return (rng.random(p.shape) < p).astype(np.float64)
    return ng.value_of(dec.mean) + np.exp(ng.value_of(dec.log_std)) * rng.standard_normal(
        ng.value_of(dec.mean).shape
    )


def expected_entropy_sampling(
    model: VaeModel,
    po: PartialEncoder,
    p: PartialObservation,
    i: int,
    k: int,
    rng: np.random.Generator,
) -> float:
    """Average posterior entropy after hypothetically observing feature i.

    Draws k values of x_i (latent sample -> decoder), then evaluates the
    partial posterior with i added to the observed set for each draw.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if p.mask.bits[i]:
        raise ValueError(f"feature {i} is already observed")
    base = posterior_batch(po, p.values[None, :], p.mask.bits[None, :])
    zs = posterior_sample(base, rng, k).reshape(k, -1)
    xs = _sample_decoder_features(model, zs, rng)
    values = np.tile(p.values, (k, 1))
    values[:, i] = xs[:, i]
    bits = np.tile(p.mask.bits, (k, 1))
    bits[:, i] = True
    updated = posterior_batch(po, values, bits, scoring=True)
    return float(np.mean(_posterior_entropies(updated)))


def greedy_step_sampling(
    model: VaeModel,
    po: PartialEncoder,
    p: PartialObservation,
    k: int,
    rng: np.random.Generator,
) -> int:
    """Argmin over unobserved features of the expected posterior entropy.

    Shares one set of k latent/decoder draws across all candidates (common
    random numbers) and batches the k*|u| posterior evaluations; ties break
    to the smallest feature index.
    """
    uno = p.mask.unobserved_indices()
    if uno.size == 0:
        raise ValueError("no unobserved features left")
    base = posterior_batch(po, p.values[None, :], p.mask.bits[None, :])
    zs = posterior_sample(base, rng, k).reshape(k, -1)
    xs = _sample_decoder_features(model, zs, rng)

    values = np.tile(p.values, (k * uno.size, 1))
    bits = np.tile(p.mask.bits, (k * uno.size, 1))
    for row, i in enumerate(uno):
        sl = slice(row * k, (row + 1) * k)
        values[sl, i] = xs[:, i]
        bits[sl, i] = True
    updated = posterior_batch(po, values, bits, scoring=True)
    scores = _posterior_entropies(updated).reshape(uno.size, k).mean(axis=1)
    return int(uno[np.argmin(scores)])


def greedy_step_lookahead(la: LookaheadNet, p: PartialObservation) -> int:
    """Argmin of the lookahead entropies over unobserved features; one trunk
    evaluation regardless of k; ties break to the smallest index."""
    uno = p.mask.unobserved_indices()
    if uno.size == 0:
        raise ValueError("no unobserved features left")
    ents = lookahead_entropies(la, p.values[None, :], p.mask.bits[None, :])[0]
    return int(uno[np.argmin(ents[uno])])


# ---------------------------------------------------------------------------
# lookahead training


def lookahead_targets(
    model: VaeModel,
    po: PartialEncoder,
    x: np.ndarray,
    bits: np.ndarray,
    subset: np.ndarray,
    k: int,
    rng: np.random.Generator,
):
    """Sampled latents from the updated posteriors for each subset feature.

    Returns (z_targets, valid) with shapes (|S|, n, k, latent) and (|S|, n);
    rows where the feature was already observed are flagged invalid. All of
    this runs outside any gradient tape: the VAE and partial encoder stay
    frozen during lookahead training.
    """
    n, d = x.shape
    base = posterior_batch(po, x, bits)
    zs = posterior_sample(base, rng, k)  # (k, n, latent)
    lat = zs.shape[-1]
    xs = _sample_decoder_features(model, zs.reshape(k * n, lat), rng).reshape(k, n, d)
    z_targets = np.empty((subset.size, n, k, lat))
    valid = np.empty((subset.size, n), dtype=bool)
    for si, i in enumerate(subset):
        valid[si] = ~bits[:, i]
        values = np.repeat(x[None, :, :], k, axis=0).copy()  # (k, n, d)
        values[:, :, i] = xs[:, :, i]
        new_bits = np.repeat(bits[None, :, :], k, axis=0).copy()
        new_bits[:, :, i] = True
        updated = posterior_batch(po, values.reshape(k * n, d), new_bits.reshape(k * n, d))
        z_prime = posterior_sample(updated, rng, 1)[0]  # (k*n, latent)
        z_targets[si] = z_prime.reshape(k, n, lat).transpose(1, 0, 2)
    return z_targets, valid


def lookahead_loss_expr(params, enc_obs, subset, z_targets, valid, config: LookaheadConfig):
    """Mean over instances of the summed per-feature posterior NLL."""
    heads = lookahead_heads_expr(params, enc_obs, config)
    total = None
    n = enc_obs.shape[0]
    for si, i in enumerate(subset):
        mean_i = heads[:, int(i), 0, :]
        log_std_i = clamp_log_std(heads[:, int(i), 1, :])
        w = valid[si].astype(np.float64)  # mask out already-observed rows
        term = None
        for j in range(z_targets.shape[2]):
            lp = log_prob(DiagGaussian(mean=mean_i, log_std=log_std_i), z_targets[si, :, j, :])
            term = lp if term is None else ng.add(term, lp)
        nll = ng.neg(ng.vsum(ng.mul(term, w / z_targets.shape[2])))
        total = nll if total is None else ng.add(total, nll)
    return ng.div(total, float(n))


def lookahead_loss(
    model: VaeModel,
    po: PartialEncoder,
    la: LookaheadNet,
    x: np.ndarray,
    mask: ObservationMask | np.ndarray,
    k: int,
    subsample_m: int,
    rng: np.random.Generator,
) -> float:
    """Subsampled lookahead matching loss for one batch."""
    x = np.atleast_2d(x)
    bits = mask.bits if isinstance(mask, ObservationMask) else np.asarray(mask, dtype=bool)
    bits = np.broadcast_to(np.atleast_2d(bits), x.shape)
    if np.all(bits):
        raise ValueError("every feature is observed; nothing to look ahead to")
    d = x.shape[1]
    if subsample_m > d:
        raise ValueError(f"subsample_m={subsample_m} exceeds feature count {d}")
    subset = np.sort(rng.choice(d, size=subsample_m, replace=False))
    z_targets, valid = lookahead_targets(model, po, x, bits, subset, k, rng)
    enc = encode_partial_batch(x, bits)
    g = ng.Graph(
        lambda p: lookahead_loss_expr(p, enc, subset, z_targets, valid, la.config), "la_loss"
    )
    val = float(ng.evaluate(g, la.params))
    if not np.isfinite(val):
        raise ng.NumericalError("lookahead loss is non-finite")
    return val


@dataclass(frozen=True)
class LookaheadTrainResult:
    lookahead: LookaheadNet
    opt_state: OptimizerState
    metrics: list[dict]
    seed: int
    step: int
    diverged_at: int | None = None


def train_lookahead(
    dataset: Dataset,
    model: VaeModel,
    po: PartialEncoder,
    la_config: LookaheadConfig,
    cfg: TrainConfig,
    k: int = 64,
    subsample_m: int = 128,
    mask_sampler: MaskSampler | None = None,
    dtype=np.float64,
) -> LookaheadTrainResult:
    """Fit the lookahead network against the frozen VAE + partial encoder."""
    if dataset.n == 0:
        raise ValueError("cannot train on an empty dataset")
    mask_sampler = mask_sampler or MaskSampler(kind="uniform_fraction", lo=0.0, hi=0.2)
    subsample_m = min(subsample_m, la_config.data_dim)
    rng = np.random.default_rng(cfg.seed)
    la = init_lookahead(la_config, rng, dtype)
    params = la.params
    state = adam_init(params, cfg.lr, cfg.lr_decay_rate, cfg.lr_decay_every)
    metrics: list[dict] = []
    last_good = params
    for step in range(cfg.steps):
        batch = minibatch(dataset, cfg.batch_size, rng).astype(dtype)
        bits = mask_sampler.matrix(batch.shape[0], la_config.data_dim, rng)
        subset = np.sort(rng.choice(la_config.data_dim, size=subsample_m, replace=False))
        z_targets, valid = lookahead_targets(model, po, batch, bits, subset, k, rng)
        enc = encode_partial_batch(batch, bits)
        graph = ng.Graph(
            lambda p: lookahead_loss_expr(p, enc, subset, z_targets, valid, la_config)
        )
        try:
            loss, grads = ng.value_and_gradient(graph, params)
            if not np.isfinite(loss):
                raise ng.NumericalError("loss is non-finite")
            last_good = params
            params, state = adam_step(params, grads, state)
        except ng.NumericalError:
            return LookaheadTrainResult(
                la.replace_params(last_good), state, metrics, cfg.seed, step, step
            )
        if step % cfg.log_every == 0 or step == cfg.steps - 1:
            metrics.append({"step": step, "loss": float(loss), "lr": current_lr(state)})
    return LookaheadTrainResult(
        la.replace_params(params), state, metrics, cfg.seed, cfg.steps
    )


# ---------------------------------------------------------------------------
# episodes


@dataclass(frozen=True)
class AcquisitionTrajectory:
    """Step 0 is the initial imputation; acquisitions follow in order."""

    acquired: list[int]
    rmse: list[float]  # length budget + 1
    select_seconds: list[float]  # length budget + 1, 0.0 at step 0
    policy: str
    instance_id: int = -1


def _impute_rmse(
    model: VaeModel,
    po: PartialEncoder,
    p: PartialObservation,
    x_true: np.ndarray,
    initial_u: np.ndarray,
    n_latents: int,
    rng: np.random.Generator,
) -> float:
    """RMSE over the episode's initial unobserved set.

    Revealed features contribute zero error (their true value is known), so
    the curve reflects both acquisitions and improving imputations.
    """
    if initial_u.size == 0:
        return 0.0
    uno = p.mask.unobserved_indices()
    err = np.zeros(p.values.size)
    if uno.size > 0:
        q = posterior_batch(po, p.values[None, :], p.mask.bits[None, :])
        zs = posterior_sample(q, rng, n_latents).reshape(n_latents, -1)
        means = decoder_mean(decode(model, zs)).mean(axis=0)
        err[uno] = means[uno] - x_true[uno]
    return float(np.sqrt(np.mean(err[initial_u] ** 2)))


def run_episode(
    model: VaeModel,
    po: PartialEncoder,
    la: LookaheadNet | None,
    x_true: np.ndarray,
    initial_mask: ObservationMask,
    budget: int,
    policy: str,
    n_latents: int = 50,
    k: int = 16,
    rng: np.random.Generator | None = None,
    instance_id: int = -1,
) -> AcquisitionTrajectory:
    """Acquire `budget` features one at a time, imputing after each reveal.

    Revealed values come from the held-back true instance. Policies:
    random, sampling (expected-entropy argmin), lookahead (needs `la`).
    """
    rng = rng or np.random.default_rng(0)
    if policy not in ("random", "sampling", "lookahead"):
        raise ValueError(f"unknown policy: {policy!r}")
    if policy == "lookahead" and la is None:
        raise ValueError("lookahead policy requires a lookahead network")
    bits = initial_mask.bits.copy()
    if budget > int((~bits).sum()):
        raise ValueError("budget exceeds the number of unobserved features")
    initial_u = np.flatnonzero(~bits)
    values = np.where(bits, x_true, 0.0)
    p = PartialObservation(values, ObservationMask(bits))
    acquired: list[int] = []
    rmses = [_impute_rmse(model, po, p, x_true, initial_u, n_latents, rng)]
    select_seconds = [0.0]
    for _ in range(budget):
        start = time.perf_counter()
        if policy == "random":
            choice = int(rng.choice(p.mask.unobserved_indices()))
        elif policy == "sampling":
            choice = greedy_step_sampling(model, po, p, k, rng)
        else:
            choice = greedy_step_lookahead(la, p)
        select_seconds.append(time.perf_counter() - start)
        acquired.append(choice)
        bits = p.mask.bits.copy()
        bits[choice] = True
        values = np.where(bits, x_true, 0.0)
        p = PartialObservation(values, ObservationMask(bits))
        rmses.append(_impute_rmse(model, po, p, x_true, initial_u, n_latents, rng))
    return AcquisitionTrajectory(
        acquired=acquired,
        rmse=rmses,
        select_seconds=select_seconds,
        policy=policy,
        instance_id=instance_id,
    )


# ---------------------------------------------------------------------------
# timing benchmark


def bench_acquisition(
    model: VaeModel,
    po: PartialEncoder,
    la: LookaheadNet,
    d: int,
    k: int,
    trials: int,
    rng: np.random.Generator | None = None,
    observed_fraction: float = 0.1,
    scaling_ks: tuple[int, ...] = (2, 4, 8, 16),
) -> dict:
    """Wall-clock per greedy step, sampling vs lookahead, plus k*|u| scaling.

    The scaling section times the sampling step across several k values and
    fits time against k*|u| by least squares (reported with R^2).
    """
    rng = rng or np.random.default_rng(0)
    n_obs = max(1, int(round(observed_fraction * d)))
    bits = np.zeros(d, dtype=bool)
    bits[rng.choice(d, size=n_obs, replace=False)] = True
    x = rng.standard_normal(d)
    p = PartialObservation(np.where(bits, x, 0.0), ObservationMask(bits))

    def time_fn(fn, reps):
        out = []
        for _ in range(reps):
            start = time.perf_counter()
            fn()
            out.append(time.perf_counter() - start)
        return np.asarray(out)

    greedy_step_sampling(model, po, p, k, rng)  # warm-up
    greedy_step_lookahead(la, p)
    sampling_times = time_fn(lambda: greedy_step_sampling(model, po, p, k, rng), trials)
    lookahead_times = time_fn(lambda: greedy_step_lookahead(la, p), trials)

    rows, times = [], []
    n_u = int((~bits).sum())
    for kk in scaling_ks:
        reps = max(3, trials // 2)
        t = time_fn(lambda: greedy_step_sampling(model, po, p, kk, rng), reps)
        rows.append(kk * n_u)
        times.append(float(np.mean(t)))
    rows_arr = np.asarray(rows, dtype=np.float64)
    times_arr = np.asarray(times)
    slope, intercept = np.polyfit(rows_arr, times_arr, 1)
    pred = slope * rows_arr + intercept
    ss_res = float(np.sum((times_arr - pred) ** 2))
    ss_tot = float(np.sum((times_arr - times_arr.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0

    return {
        "d": d,
        "k": k,
        "trials": trials,
        "sampling_mean_s": float(sampling_times.mean()),
        "sampling_sd_s": float(sampling_times.std(ddof=1)) if trials > 1 else 0.0,
        "lookahead_mean_s": float(lookahead_times.mean()),
        "lookahead_sd_s": float(lookahead_times.std(ddof=1)) if trials > 1 else 0.0,
        "speedup": float(sampling_times.mean() / lookahead_times.mean()),
        "scaling_rows": rows,
        "scaling_times_s": times,
        "scaling_slope": float(slope),
        "scaling_intercept": float(intercept),
        "scaling_r2": float(r2),
    }
