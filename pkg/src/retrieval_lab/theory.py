"""Monte Carlo and algebraic checks of the calibration-gap analysis.

A scorer S with temperature tau induces a global softmax over all N documents
and a local softmax over K sampled candidates. The difference of their log
normalizers is the calibration gap; it concentrates near log(N/K) shifted by
the proposal mismatch delta. This module estimates the gap, delta, and the
tail behavior of candidate partial sums, and checks the exact identities
(cross-entropy decomposition, low-rank approximation error) the analysis
leans on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import logsumexp, numerical_rank, svd
from .rng import RandomStream
from .validation import (
    DomainError,
    as_matrix,
    as_vector,
    check_count,
    check_distribution,
    check_positive,
    check_unit_interval,
)

__all__ = [
    "partition_functions",
    "proposal_distribution",
    "estimate_delta",
    "exact_delta",
    "GapReport",
    "estimate_gap",
    "TailReport",
    "check_bernstein_tail",
    "EckartYoungReport",
    "eckart_young_check",
    "CeKlReport",
    "ce_kl_decomposition",
    "numerical_rank",
]


def partition_functions(scores_row, candidate_indices, tau=1.0) -> tuple[float, float]:
    """(log Z, log Z_K): log normalizers over all docs and over a candidate set."""
    s = as_vector(scores_row, "scores_row")
    check_positive(tau, "tau")
    cand = np.asarray(candidate_indices, dtype=np.int64)
    if cand.size == 0:
        raise DomainError("candidate_indices must be non-empty")
    if cand.min() < 0 or cand.max() >= len(s):
        raise DomainError("candidate index out of range")
    return float(logsumexp(s / tau)), float(logsumexp(s[cand] / tau))


def proposal_distribution(scores_row, hard_ratio=0.0, hard_pool_size=32) -> np.ndarray:
    """Candidate proposal over documents: uniform mixed with a top-score pool.

    The hard_ratio share of mass spreads evenly over the hard_pool_size
    highest-scoring documents (ties to the lower index); the rest is uniform.
    """
    s = as_vector(scores_row, "scores_row")
    check_unit_interval(hard_ratio, "hard_ratio")
    check_count(hard_pool_size, "hard_pool_size")
    n = len(s)
    pi = np.full(n, (1.0 - hard_ratio) / n)
    if hard_ratio > 0.0:
        width = min(hard_pool_size, n)
        top = np.argsort(-s, kind="stable")[:width]
        pi[top] += hard_ratio / width
    return pi


def exact_delta(scores_row, pi, tau=1.0) -> float:
    """delta(q) = log E_pi[e^{S/tau}] - log E_mu[e^{S/tau}], mu uniform."""
    s = as_vector(scores_row, "scores_row")
    p = check_distribution(pi, "pi")
    check_positive(tau, "tau")
    if len(p) != len(s):
        raise DomainError("pi and scores_row must have equal length")
    z = s / tau
    c = float(np.max(z))
    log_e_pi = c + math.log(float(np.dot(p, np.exp(z - c))))
    log_e_mu = float(logsumexp(z)) - math.log(len(s))
    return log_e_pi - log_e_mu


def estimate_delta(scores_row, pi, tau, num_samples, stream: RandomStream) -> tuple[float, float]:
    """Monte Carlo (delta estimate, standard error) for one query.

    The uniform-side expectation is a finite sum and is computed exactly;
    only E_pi is sampled, and its log gets a delta-method standard error.
    The estimate always lies in [-2M, 2M] for M = max |S/tau|.
    """
    s = as_vector(scores_row, "scores_row")
    p = check_distribution(pi, "pi")
    check_positive(tau, "tau")
    check_count(num_samples, "num_samples", minimum=2)
    if len(p) != len(s):
        raise DomainError("pi and scores_row must have equal length")
    z = s / tau
    c = float(np.max(z))
    gen = stream.generator()
    cdf = np.cumsum(p)
    draws = np.searchsorted(cdf, gen.random(num_samples), side="right")
    draws = np.minimum(draws, len(s) - 1)
    x = np.exp(z[draws] - c)
    mean = float(np.mean(x))
    se = float(np.std(x, ddof=1)) / (mean * math.sqrt(num_samples))
    log_e_pi = c + math.log(mean)
    log_e_mu = float(logsumexp(z)) - math.log(len(s))
    return log_e_pi - log_e_mu, se


@dataclass(frozen=True)
class GapReport:
    """Calibration-gap estimate in both orientations, with its guaranteed floor.

    gap is E[log Z - log Z_K] >= 0, how far the local objective overstates
    global calibration; signed_gap is its negation E[log Z_K - log Z]. The
    theory floors the signed orientation: signed_gap >= log(K/N) - delta
    (see the floor and signed_slack properties; signed_slack should be
    nonnegative up to Monte Carlo error, with se combining both estimates).
    bound = log(N/K) - delta_hat is the same floor mirrored for the positive
    orientation, and slack = gap - bound by construction.
    """

    gap: float
    signed_gap: float
    bound: float
    slack: float
    se: float
    gap_se: float
    delta_hat: float
    delta_se: float
    trials: int
    num_docs: int
    num_candidates: int

    @property
    def log_ratio(self) -> float:
        return math.log(self.num_docs / self.num_candidates)

    @property
    def floor(self) -> float:
        """Lower bound on the signed gap: log(K/N) - delta_hat."""
        return -self.log_ratio - self.delta_hat

    @property
    def signed_slack(self) -> float:
        """signed_gap - floor; nonnegative up to Monte Carlo error."""
        return self.signed_gap - self.floor


def estimate_gap(
    world,
    scores,
    num_candidates: int,
    tau: float,
    trials: int,
    stream: RandomStream,
    proposal=None,
    delta_samples: int = 100_000,
    num_batches: int = 100,
) -> GapReport:
    """Monte Carlo gap estimate over (query, positive, K-1 proposal draws).

    Queries are uniform, positives follow the world posterior, negatives are
    i.i.d. from the per-query proposal (uniform when omitted). The standard
    error comes from batch means over independent substreams.
    """
    s = as_matrix(scores, "scores")
    m, n = s.shape
    if (m, n) != (world.num_queries, world.num_docs):
        raise DomainError("scores shape does not match the world")
    check_positive(tau, "tau")
    k = check_count(num_candidates, "num_candidates", minimum=2)
    if k > n:
        raise DomainError(f"num_candidates {k} exceeds corpus size {n}")
    check_count(num_batches, "num_batches", minimum=2)
    if trials < num_batches:
        raise DomainError(f"trials must be at least num_batches ({num_batches})")
    if proposal is None:
        pi = np.full((m, n), 1.0 / n)
    else:
        pi = as_matrix(proposal, "proposal")
        if pi.shape != (m, n):
            raise DomainError("proposal shape does not match the world")
        for q in range(m):
            check_distribution(pi[q], f"proposal[{q}]")
    z = s / tau
    log_z = logsumexp(z, axis=1)
    pi_cdf = np.cumsum(pi, axis=1)
    per_batch = trials // num_batches

    batch_means = np.empty(num_batches)
    for b in range(num_batches):
        gen = stream.split(b).generator()
        qs = gen.integers(0, m, size=per_batch)
        u_pos = gen.random(per_batch)
        u_neg = gen.random((per_batch, k - 1))
        total = 0.0
        for q in np.unique(qs):
            rows = np.nonzero(qs == q)[0]
            pos = np.searchsorted(world.posterior_cdf[q], u_pos[rows], side="right")
            pos = np.minimum(pos, n - 1)
            negs = np.searchsorted(pi_cdf[q], u_neg[rows], side="right")
            negs = np.minimum(negs, n - 1)
            cand = np.concatenate([pos[:, None], negs], axis=1)
            log_zk = logsumexp(z[q][cand], axis=1)
            total += float(np.sum(log_z[q] - log_zk))
        batch_means[b] = total / per_batch

    gap = float(np.mean(batch_means))
    gap_se = float(np.std(batch_means, ddof=1)) / math.sqrt(num_batches)

    deltas = np.empty(m)
    delta_vars = np.empty(m)
    for q in range(m):
        d, se_q = estimate_delta(s[q], pi[q], tau, delta_samples, stream.split(num_batches + q))
        deltas[q] = d
        delta_vars[q] = se_q**2
    delta_hat = float(np.mean(deltas))
    delta_se = float(math.sqrt(delta_vars.sum()) / m)

    bound = math.log(n / k) - delta_hat
    return GapReport(
        gap=gap,
        signed_gap=-gap,
        bound=bound,
        slack=gap - bound,
        se=math.sqrt(gap_se**2 + delta_se**2),
        gap_se=gap_se,
        delta_hat=delta_hat,
        delta_se=delta_se,
        trials=per_batch * num_batches,
        num_docs=n,
        num_candidates=k,
    )


@dataclass(frozen=True)
class TailReport:
    """Observed lower-tail frequency of candidate partial sums vs its bound."""

    frequency: float
    bound: float
    se: float
    trials: int
    num_candidates: int
    epsilon: float
    mean: float
    relative_variance: float


def check_bernstein_tail(
    scores_row,
    pi,
    tau: float,
    num_candidates: int,
    epsilon: float,
    trials: int,
    stream: RandomStream,
    moment_samples: int = 1_000_000,
) -> TailReport:
    """Frequency of {log mean of K proposal draws <= log mu_pi - epsilon}.

    The Bernstein-style bound exp(-K eps^2 / (2 (sigma^2/mu^2 + eps/3))) uses
    moments of X = e^{S/tau} under pi, estimated from an independent sample.
    A degenerate X never undershoots its mean, so the frequency is zero.
    """
    s = as_vector(scores_row, "scores_row")
    p = check_distribution(pi, "pi")
    check_positive(tau, "tau")
    k = check_count(num_candidates, "num_candidates")
    check_positive(epsilon, "epsilon")
    check_count(trials, "trials")
    check_count(moment_samples, "moment_samples", minimum=2)
    if len(p) != len(s):
        raise DomainError("pi and scores_row must have equal length")
    z = s / tau
    c = float(np.max(z))
    cdf = np.cumsum(p)

    gen_m = stream.split(0).generator()
    draws = np.minimum(np.searchsorted(cdf, gen_m.random(moment_samples), side="right"), len(s) - 1)
    x = np.exp(z[draws] - c)
    mu = float(np.mean(x))
    rel_var = float(np.var(x, ddof=1)) / mu**2
    log_mu = c + math.log(mu)

    gen_t = stream.split(1).generator()
    threshold = log_mu - epsilon
    hits = 0
    chunk = max(1, min(trials, 10_000_000 // max(k, 1)))
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        d = np.minimum(np.searchsorted(cdf, gen_t.random((t, k)), side="right"), len(s) - 1)
        log_means = logsumexp(z[d], axis=1) - math.log(k)
        hits += int(np.sum(log_means <= threshold))
        done += t
    freq = hits / trials
    bound = math.exp(-k * epsilon**2 / (2.0 * (rel_var + epsilon / 3.0)))
    se = math.sqrt(max(freq * (1.0 - freq), 1.0 / trials) / trials)
    return TailReport(
        frequency=freq,
        bound=min(bound, 1.0),
        se=se,
        trials=trials,
        num_candidates=k,
        epsilon=epsilon,
        mean=log_mu,
        relative_variance=rel_var,
    )


@dataclass(frozen=True)
class EckartYoungReport:
    """Best rank-r approximation error: spectral tail vs a trained factorization."""

    rank: int
    tail_energy: float
    trained_loss: float
    relative_excess: float
    iterations: int


def eckart_young_check(
    matrix,
    rank: int,
    stream: RandomStream | None = None,
    max_iters: int = 5000,
    tol: float = 1e-12,
) -> EckartYoungReport:
    """Fit min_{U,V} ||A - U V||_F^2 at the given rank and compare to the tail.

    The optimum equals the sum of squared singular values past the rank
    (zero once rank >= rank(A)). Training is deterministic full-batch
    gradient descent with an adaptive step: halve on an increase, grow 5%
    on a decrease.
    """
    a = as_matrix(matrix, "matrix")
    r = check_count(rank, "rank")
    sv = svd(a).s
    tail = float(np.sum(sv[r:] ** 2)) if r < len(sv) else 0.0

    stream = stream or RandomStream(0)
    gen = stream.generator()
    scale = 1.0 / math.sqrt(max(r, 1))
    u = gen.standard_normal((a.shape[0], r)) * scale
    v = gen.standard_normal((r, a.shape[1])) * scale
    resid = u @ v - a
    loss = float(np.sum(resid * resid))
    step = 1.0 / max(float(sv[0]) ** 2, 1.0)
    iters = 0
    for iters in range(1, max_iters + 1):
        gu = 2.0 * resid @ v.T
        gv = 2.0 * u.T @ resid
        while True:
            u_new = u - step * gu
            v_new = v - step * gv
            resid_new = u_new @ v_new - a
            loss_new = float(np.sum(resid_new * resid_new))
            if loss_new <= loss or step < 1e-20:
                break
            step *= 0.5
        improved = loss - loss_new
        u, v, resid = u_new, v_new, resid_new
        loss = loss_new
        step *= 1.05
        if improved <= tol * max(loss, 1.0):
            break
    excess = (loss - tail) / max(tail, 1e-300) if tail > 0 else loss
    return EckartYoungReport(
        rank=r,
        tail_energy=tail,
        trained_loss=loss,
        relative_excess=float(excess),
        iterations=iters,
    )


@dataclass(frozen=True)
class CeKlReport:
    """Cross-entropy split into intrinsic entropy plus model divergence."""

    cross_entropy: float
    entropy: float
    kl: float
    residual: float
    infinite_kl: bool


def ce_kl_decomposition(p_star, p_model) -> CeKlReport:
    """CE(P*, P) = H(P*) + KL(P* || P), accumulated with exact summation.

    Terms reuse the same rounded products so the residual is at the level of
    a few ulps. A model that puts zero mass on a supported outcome yields
    infinite cross-entropy and KL, flagged rather than raised.
    """
    p = check_distribution(p_star, "p_star")
    q = check_distribution(p_model, "p_model")
    if len(p) != len(q):
        raise DomainError("p_star and p_model must have equal length")
    support = p > 0.0
    infinite = bool(np.any(support & (q <= 0.0)))
    if infinite:
        b = [float(pi * math.log(pi)) for pi in p[support]]
        return CeKlReport(
            cross_entropy=math.inf,
            entropy=-math.fsum(b),
            kl=math.inf,
            residual=0.0,
            infinite_kl=True,
        )
    a = [float(pi * math.log(qi)) for pi, qi in zip(p[support], q[support])]
    b = [float(pi * math.log(pi)) for pi in p[support]]
    k = [float(pi * (math.log(pi) - math.log(qi))) for pi, qi in zip(p[support], q[support])]
    ce = -math.fsum(a)
    h = -math.fsum(b)
    kl = math.fsum(k)
    return CeKlReport(
        cross_entropy=ce,
        entropy=h,
        kl=kl,
        residual=ce - h - kl,
        infinite_kl=False,
    )
