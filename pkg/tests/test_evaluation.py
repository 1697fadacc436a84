import math

import numpy as np
import pytest

from retrieval_lab.evaluation import (
    RankedRun,
    brier_score,
    gold_documents,
    hits_at_k,
    kl_divergence,
    mrr_at_k,
    ndcg_at_k,
    run_brier,
    tv_distance,
)
from retrieval_lab.validation import DomainError
from retrieval_lab.world import world_from_logits


def _single_query_run(ranking, gold, prob=None):
    probs = None if prob is None else (prob,)
    return RankedRun((tuple(ranking),), (gold,), probs)


class TestBrier:
    def test_confident_correct_scores_zero(self):
        assert brier_score([1.0], [1]) == pytest.approx(0.0, abs=0)

    def test_underconfident_correct(self):
        assert brier_score([0.3], [1]) == pytest.approx(0.49, abs=1e-15)

    def test_mean_over_predictions(self):
        assert brier_score([1.0, 0.3], [1, 1]) == pytest.approx(0.245, abs=1e-15)

    def test_run_brier_uses_top1_correctness(self):
        run = RankedRun(((3, 1), (2, 0)), (3, 0), (1.0, 0.3))
        # first query correct with prob 1, second wrong with prob 0.3
        assert run_brier(run) == pytest.approx((0.0 + 0.09) / 2, abs=1e-15)

    def test_out_of_range_probability_rejected(self):
        with pytest.raises(DomainError):
            brier_score([1.5], [1])


class TestRankMetrics:
    def test_mrr_with_gold_at_rank_three(self):
        run = _single_query_run([7, 8, 5, 1], gold=5)
        assert mrr_at_k(run, 10) == pytest.approx(1.0 / 3.0, abs=1e-15)

    def test_ndcg_with_gold_at_rank_two(self):
        run = _single_query_run([7, 5, 1], gold=5)
        assert ndcg_at_k(run, 10) == pytest.approx(1.0 / math.log2(3.0), abs=1e-12)
        assert ndcg_at_k(run, 10) == pytest.approx(0.6309297535714574, abs=1e-12)

    def test_hits_counts_presence(self):
        run = RankedRun(((1, 2), (3, 4)), (2, 9))
        assert hits_at_k(run, 2) == pytest.approx(0.5)
        assert hits_at_k(run, 1) == pytest.approx(0.0)

    def test_hits_dominates_mrr_at_every_depth(self):
        rng = np.random.default_rng(5)
        rankings, gold = [], []
        for _ in range(20):
            docs = rng.permutation(16)
            rankings.append(tuple(int(d) for d in docs[:8]))
            gold.append(int(rng.integers(16)))
        run = RankedRun(tuple(rankings), tuple(gold))
        for k in (1, 2, 4, 8):
            assert hits_at_k(run, k) >= mrr_at_k(run, k)

    def test_metrics_monotone_in_depth(self):
        rng = np.random.default_rng(6)
        rankings = tuple(tuple(int(d) for d in rng.permutation(12)) for _ in range(10))
        gold = tuple(int(rng.integers(12)) for _ in range(10))
        run = RankedRun(rankings, gold)
        for metric in (hits_at_k, mrr_at_k, ndcg_at_k):
            values = [metric(run, k) for k in (1, 2, 4, 8, 12)]
            assert all(b >= a - 1e-15 for a, b in zip(values, values[1:]))

    def test_perfect_run_scores_one_everywhere(self):
        run = RankedRun(((4, 1), (2, 0)), (4, 2))
        assert hits_at_k(run, 1) == 1.0
        assert mrr_at_k(run, 5) == 1.0
        assert ndcg_at_k(run, 5) == 1.0


class TestDistributionDistances:
    def test_tv_hand_example(self):
        assert tv_distance([0.4, 0.6], [0.5, 0.5]) == pytest.approx(0.1, abs=1e-15)

    def test_tv_is_zero_on_identical(self):
        assert tv_distance([0.25] * 4, [0.25] * 4) == 0.0

    def test_kl_zero_on_identical(self):
        assert kl_divergence([0.3, 0.7], [0.3, 0.7]) == pytest.approx(0.0, abs=1e-15)

    def test_kl_infinite_when_support_missing(self):
        assert kl_divergence([0.5, 0.5], [1.0, 0.0]) == math.inf

    def test_kl_nonnegative(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            p = rng.dirichlet(np.ones(6))
            q = rng.dirichlet(np.ones(6))
            assert kl_divergence(p, q) >= 0.0


class TestGold:
    def test_argmax_with_tie_takes_lower_index(self):
        world = world_from_logits(np.log(np.array([[0.4, 0.4, 0.2]])))
        assert gold_documents(world)[0] == 0

    def test_gold_tracks_posterior_peak(self):
        world = world_from_logits(np.array([[0.0, 3.0, 1.0], [2.0, 0.0, 0.1]]))
        assert list(gold_documents(world)) == [1, 0]
