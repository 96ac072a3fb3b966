"""Exact-enumeration check that the latent-matching objective and the
conditional-likelihood objective differ only by a constant in the partial
posterior's parameters.

The toy model is fully tabular: a categorical latent z with K values, a
binary unobserved block with M = 2^{n_u} configurations, a fixed observed
context, and row/column-stochastic tables for the encoder, decoder, and the
data conditional. Objective A is the expected KL from the full posterior to
the partial posterior q_theta; objective B is the expected negative
conditional log-likelihood plus the KL to the x_u-updated partial posterior

    q_theta(z | x_o, x_u) ∝ p(x_u | z) q_theta(z | x_o),
    m(x_u | x_o) = sum_z p(x_u | z) q_theta(z | x_o).

Both are computed by exact summation; their gap must be independent of
theta, and their theta-gradients (reverse mode, exact) must coincide.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ndgrad as ng


@dataclass(frozen=True)
class EnumerableToy:
    """All densities as tables; columns index x_u configurations."""

    p_xu: np.ndarray  # (M,) data conditional p(x_u | x_o)
    q_full: np.ndarray  # (K, M) encoder q(z | x_o, x_u), column-stochastic
    p_dec: np.ndarray  # (K, M) decoder p(x_u | z, x_o), row-stochastic

    def __post_init__(self):
        k, m = self.q_full.shape
        if self.p_xu.shape != (m,) or self.p_dec.shape != (k, m):
            raise ValueError("table shapes disagree")
        if k > 16 or m > 16:
            raise ValueError("toy must stay enumerable (K <= 16, |u| <= 4)")
        for name, table, axis in (
            ("p_xu", self.p_xu, 0),
            ("q_full", self.q_full, 0),
            ("p_dec", self.p_dec, 1),
        ):
            sums = table.sum(axis=axis)
            if not np.allclose(sums, 1.0, atol=1e-9):
                raise ValueError(f"{name} is not normalized")

    @property
    def n_latent(self) -> int:
        return self.q_full.shape[0]


def random_toy(
    k: int, n_u: int, rng: np.random.Generator, self_consistent: bool = False
) -> EnumerableToy:
    """Random tables; `self_consistent` derives everything from one joint.

    In the self-consistent case p(x_u | x_o) is the decoder marginal under a
    latent prior r, and the encoder is the exact posterior, so the aggregate
    partial posterior equals r.
    """
    m = 2**n_u
    p_dec = rng.dirichlet(np.ones(m), size=k)
    if self_consistent:
        r = rng.dirichlet(np.ones(k))
        p_xu = r @ p_dec
        q_full = (r[:, None] * p_dec) / p_xu[None, :]
    else:
        p_xu = rng.dirichlet(np.ones(m))
        q_full = rng.dirichlet(np.ones(k), size=m).T
    return EnumerableToy(p_xu=p_xu, q_full=q_full, p_dec=p_dec)


def _log_softmax(theta):
    return ng.sub(theta, ng.logsumexp(theta, axis=-1, keepdims=False))


def objective_a_expr(params, toy: EnumerableToy):
    """E over x_u of KL(q_full(.|x_u) || q_theta), exact summation."""
    logq = _log_softmax(params["theta"])  # (K,)
    w = toy.p_xu[None, :] * toy.q_full  # (K, M), constants
    const = float(np.sum(w * np.log(toy.q_full)))
    cross = ng.vsum(ng.mul(w.sum(axis=1), logq))
    return ng.sub(const, cross)


def objective_b_expr(params, toy: EnumerableToy):
    """E over x_u of [-log m(x_u|x_o) + KL(q_full || q_theta-updated)]."""
    logq = _log_softmax(params["theta"])  # (K,)
    log_dec = np.log(toy.p_dec)  # (K, M)
    # log m_j = logsumexp_k(log_dec[k, j] + logq[k])
    logits = ng.add(log_dec, ng.reshape(logq, (toy.n_latent, 1)))
    log_m = ng.logsumexp(ng.swapaxes(logits, 0, 1), axis=-1)  # (M,)
    nll = ng.neg(ng.vsum(ng.mul(toy.p_xu, log_m)))
    # log q_post[k, j] = logits[k, j] - log_m[j]
    log_post = ng.sub(logits, ng.reshape(log_m, (1, log_m.shape[0])))
    w = toy.p_xu[None, :] * toy.q_full
    const = float(np.sum(w * np.log(toy.q_full)))
    kl = ng.sub(const, ng.vsum(ng.mul(w, log_post)))
    return ng.add(nll, kl)


def analytic_gap(toy: EnumerableToy) -> float:
    """The theta-free difference A - B: E[ E_{z~q_full} log p_dec(x_u | z) ]."""
    w = toy.p_xu[None, :] * toy.q_full
    return float(np.sum(w * np.log(toy.p_dec)))


def aggregate_posterior(toy: EnumerableToy) -> np.ndarray:
    """The exact target of objective A: sum_j p(x_u_j | x_o) q_full(. | x_u_j)."""
    return toy.q_full @ toy.p_xu


@dataclass(frozen=True)
class EquivalenceReport:
    gap_mean: float
    gap_variance: float
    gradient_max_diff: float
    analytic_gap_max_err: float


def equivalence_report(
    toy: EnumerableToy, n_theta: int = 10, rng: np.random.Generator | None = None
) -> EquivalenceReport:
    """Evaluate A, B, and their gradients at random theta draws.

    The gap A - B must have (numerically) zero variance across draws and the
    exact reverse-mode gradients of A and B must agree elementwise.
    """
    rng = rng or np.random.default_rng(0)
    gaps, grad_diffs, analytic_errs = [], [], []
    ga = ng.Graph(lambda p: objective_a_expr(p, toy), "obj_a")
    gb = ng.Graph(lambda p: objective_b_expr(p, toy), "obj_b")
    want_gap = analytic_gap(toy)
    for _ in range(n_theta):
        params = ng.ParamSet([("theta", rng.standard_normal(toy.n_latent))])
        a, grad_a = ng.value_and_gradient(ga, params)
        b, grad_b = ng.value_and_gradient(gb, params)
        gaps.append(float(a - b))
        grad_diffs.append(float(np.max(np.abs(grad_a["theta"] - grad_b["theta"]))))
        analytic_errs.append(abs(float(a - b) - want_gap))
    return EquivalenceReport(
        gap_mean=float(np.mean(gaps)),
        gap_variance=float(np.var(gaps)),
        gradient_max_diff=float(np.max(grad_diffs)),
        analytic_gap_max_err=float(np.max(analytic_errs)),
    )


def equivalence_suite(
    n_toys: int = 20,
    k_max: int = 16,
    u_max: int = 4,
    n_theta: int = 10,
    seed: int = 0,
) -> list[dict]:
    """Reports for a batch of random enumerable toys (CLI/acceptance entry)."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n_toys):
        k = int(rng.integers(2, k_max + 1))
        n_u = int(rng.integers(1, u_max + 1))
        toy = random_toy(k, n_u, rng, self_consistent=bool(i % 2))
        rep = equivalence_report(toy, n_theta=n_theta, rng=rng)
        out.append(
            {
                "toy": i,
                "k": k,
                "n_u": n_u,
                "gap_mean": rep.gap_mean,
                "gap_variance": rep.gap_variance,
                "gradient_max_diff": rep.gradient_max_diff,
                "analytic_gap_max_err": rep.analytic_gap_max_err,
            }
        )
    return out
