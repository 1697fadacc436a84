"""Ranking quality and probability calibration metrics.

Every metric works on a RankedRun: one ranked document list per query plus
the single gold document and, when the retriever exposes them, the model
probability of each returned document. Rank metrics are per-query means;
Brier uses the top-1 probability against whether the top-1 was the gold.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .validation import DomainError, check_count, check_distribution


@dataclass(frozen=True)
class RankedRun:
    """Retrieval output for a set of queries over a shared candidate pool."""

    rankings: tuple[tuple[int, ...], ...]
    gold: tuple[int, ...]
    top_probs: tuple[float, ...] | None = None

    def __post_init__(self):
        if len(self.rankings) != len(self.gold):
            raise DomainError("rankings and gold must have one entry per query")
        if not self.rankings:
            raise DomainError("a run needs at least one query")
        if self.top_probs is not None and len(self.top_probs) != len(self.gold):
            raise DomainError("top_probs must have one entry per query")

    @property
    def num_queries(self) -> int:
        return len(self.rankings)

    @property
    def depth(self) -> int:
        return min(len(r) for r in self.rankings)


def _gold_rank(ranking, gold) -> int | None:
    """1-based rank of the gold document, or None when absent."""
    for pos, doc in enumerate(ranking):
        if doc == gold:
            return pos + 1
    return None


def hits_at_k(run: RankedRun, k: int) -> float:
    """Fraction of queries whose gold document appears in the top k."""
    check_count(k, "k")
    total = 0
    for ranking, gold in zip(run.rankings, run.gold):
        rank = _gold_rank(ranking[:k], gold)
        total += rank is not None
    return total / run.num_queries


def mrr_at_k(run: RankedRun, k: int) -> float:
    """Mean reciprocal rank of the gold document, zero past depth k."""
    check_count(k, "k")
    total = 0.0
    for ranking, gold in zip(run.rankings, run.gold):
        rank = _gold_rank(ranking[:k], gold)
        if rank is not None:
            total += 1.0 / rank
    return total / run.num_queries


def ndcg_at_k(run: RankedRun, k: int) -> float:
    """NDCG with a single unit-gain gold: 1/log2(1 + rank), ideal = 1."""
    check_count(k, "k")
    total = 0.0
    for ranking, gold in zip(run.rankings, run.gold):
        rank = _gold_rank(ranking[:k], gold)
        if rank is not None:
            total += 1.0 / math.log2(rank + 1)
    return total / run.num_queries


def brier_score(probabilities, outcomes) -> float:
    """Mean squared error of success probabilities against 0/1 outcomes."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(outcomes, dtype=np.float64)
    if p.shape != y.shape or p.ndim != 1 or p.size == 0:
        raise DomainError("probabilities and outcomes must be equal-length non-empty vectors")
    if np.any((p < 0) | (p > 1)) or not np.isfinite(p).all():
        raise DomainError("probabilities must lie in [0, 1]")
    if np.any((y != 0) & (y != 1)):
        raise DomainError("outcomes must be 0 or 1")
    return float(np.mean((p - y) ** 2))


def run_brier(run: RankedRun) -> float:
    """Brier score of the run's top-1 probabilities against top-1 correctness."""
    if run.top_probs is None:
        raise DomainError("this run carries no probabilities")
    outcomes = [float(r[0] == g) for r, g in zip(run.rankings, run.gold)]
    return brier_score(run.top_probs, outcomes)


def tv_distance(p, q) -> float:
    """Total variation distance: half the L1 distance between distributions."""
    a = check_distribution(p, "p")
    b = check_distribution(q, "q")
    if len(a) != len(b):
        raise DomainError("distributions must have equal length")
    return 0.5 * float(np.sum(np.abs(a - b)))


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; infinite when q misses mass on p's support."""
    a = check_distribution(p, "p")
    b = check_distribution(q, "q")
    if len(a) != len(b):
        raise DomainError("distributions must have equal length")
    support = a > 0.0
    if np.any(support & (b <= 0.0)):
        return math.inf
    return math.fsum(
        float(pi * (math.log(pi) - math.log(qi))) for pi, qi in zip(a[support], b[support])
    )


def gold_documents(world) -> np.ndarray:
    """Highest-posterior document per query; ties go to the lower index."""
    return np.argmax(world.posterior, axis=1)


# ----------------------------------------------------------- run builders


def run_from_dense(model, k: int, doc_indices=None, gold=None, world=None) -> RankedRun:
    """Rank every query with a DenseRetriever; gold defaults to the world's."""
    if gold is None:
        if world is None:
            raise DomainError("provide gold documents or a world to derive them")
        gold = gold_documents(world)
    rankings, probs = [], []
    for q in range(model.num_queries_):
        docs, _, p = model.retrieve(q, k, doc_indices=doc_indices)
        rankings.append(tuple(int(d) for d in docs))
        probs.append(float(p[0]))
    return RankedRun(tuple(rankings), tuple(int(g) for g in gold), tuple(probs))


def run_from_generative(model, k: int, beam_width=None, view=None, gold=None, world=None) -> RankedRun:
    """Rank every query with beam search over a GenerativeRetriever view."""
    if gold is None:
        if world is None:
            raise DomainError("provide gold documents or a world to derive them")
        gold = gold_documents(world)
    view = view or model.view()
    if beam_width is None:
        beam_width = view.num_active_docs
    rankings, probs = [], []
    for q in range(model.num_queries_):
        docs, _, beam_probs = model.constrained_beam_search(q, beam_width, k, view=view)
        rankings.append(tuple(int(d) for d in docs))
        probs.append(float(beam_probs[0]))
    return RankedRun(tuple(rankings), tuple(int(g) for g in gold), tuple(probs))


def mean_posterior_kl(world, model_probs) -> float:
    """Average over queries of KL(world posterior || model distribution)."""
    probs = np.asarray(model_probs, dtype=np.float64)
    if probs.shape != world.posterior.shape:
        raise DomainError("model distribution shape does not match the world")
    return float(np.mean([kl_divergence(world.posterior[q], probs[q]) for q in range(world.num_queries)]))
