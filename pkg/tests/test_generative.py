import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from retrieval_lab.docid import DocidSpace, assign_unique_docids, build_trie, codebook_docids
from retrieval_lab.evaluation import kl_divergence, tv_distance
from retrieval_lab.generative import GenerativeRetriever
from retrieval_lab.numerics import finite_diff_grad, gradient_relative_error, pack_arrays, unpack_arrays
from retrieval_lab.rng import RandomStream
from retrieval_lab.validation import BudgetError, DomainError
from retrieval_lab.world import make_spectral_world, synthetic_corpus, world_from_logits

BINARY_DEPTH2 = DocidSpace(
    scheme="codebook",
    base_alphabet=2,
    docids=((0, 0, 2), (0, 1, 2), (1, 0, 2), (1, 1, 2)),
)


def _uniform_model(world, space, seed=0):
    return GenerativeRetriever(steps=0, init_scale=0.0, seed=seed).fit(world, space)


def _random_model(world, space, seed):
    return GenerativeRetriever(steps=0, init_scale=0.7, seed=seed).fit(world, space)


def _hand_world():
    posterior = np.array([[0.4, 0.1, 0.3, 0.2]])
    return world_from_logits(np.log(posterior))


class TestNodeConditional:
    def test_single_child_gets_probability_one(self):
        world = world_from_logits(np.zeros((1, 4)))
        model = _random_model(world, BINARY_DEPTH2, seed=1)
        trie = model.trie_
        # Nodes one step above the leaves have only the sentinel child.
        pre_leaf = trie.children[trie.children[0][0]][0]
        tokens, probs = model.node_conditional(0, pre_leaf)
        assert list(tokens) == [2]
        assert probs[0] == pytest.approx(1.0, abs=0)

    def test_zero_logits_four_children_uniform(self):
        space = DocidSpace(
            scheme="codebook",
            base_alphabet=4,
            docids=((0, 4), (1, 4), (2, 4), (3, 4)),
        )
        world = world_from_logits(np.zeros((1, 4)))
        model = _uniform_model(world, space)
        _, probs = model.node_conditional(0, 0)
        assert_allclose(probs, [0.25, 0.25, 0.25, 0.25], atol=1e-15)

    def test_sums_to_one_on_random_models(self):
        world = make_spectral_world(4, 8, [3.0, 1.0], RandomStream(6))
        corpus = synthetic_corpus(world, 6, RandomStream(7))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=3, seed=2)
        model = _random_model(world, space, seed=3)
        trie = model.trie_
        for node in range(trie.num_nodes):
            if trie.leaf_doc[node] is not None:
                continue
            for q in range(4):
                _, probs = model.node_conditional(q, node)
                assert abs(probs.sum() - 1.0) <= 1e-12

    def test_leaf_node_rejected(self):
        world = world_from_logits(np.zeros((1, 4)))
        model = _uniform_model(world, BINARY_DEPTH2)
        trie = model.trie_
        leaf = next(n for n in range(trie.num_nodes) if trie.leaf_doc[n] is not None)
        with pytest.raises(DomainError):
            model.node_conditional(0, leaf)


class TestLeafPosterior:
    def test_sums_to_one(self):
        world = make_spectral_world(3, 12, [4.0, 2.0], RandomStream(8))
        corpus = synthetic_corpus(world, 6, RandomStream(9))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=4, seed=4)
        model = _random_model(world, space, seed=5)
        for q in range(3):
            docs, probs = model.leaf_posterior(q)
            assert list(docs) == list(range(12))
            assert abs(probs.sum() - 1.0) <= 1e-10

    def test_matches_chain_rule_recomputation(self):
        world = world_from_logits(np.zeros((2, 4)))
        model = _random_model(world, BINARY_DEPTH2, seed=6)
        for q in range(2):
            _, probs = model.leaf_posterior(q)
            for doc, docid in enumerate(BINARY_DEPTH2.docids):
                node, logp = 0, 0.0
                for token in docid:
                    tokens, cond = model.node_conditional(q, node)
                    logp += math.log(cond[list(tokens).index(token)])
                    node = model.trie_.children[node][token]
                assert probs[doc] == pytest.approx(math.exp(logp), abs=1e-12)

    def test_budget_exceeded_advises_beam(self):
        world = world_from_logits(np.zeros((1, 4)))
        model = GenerativeRetriever(steps=0, leaf_token_budget=4, seed=0).fit(world, BINARY_DEPTH2)
        with pytest.raises(BudgetError, match="constrained_beam_search"):
            model.leaf_posterior(0)


class TestNll:
    def test_uniform_binary_depth_two(self):
        world = world_from_logits(np.zeros((1, 4)))
        model = _uniform_model(world, BINARY_DEPTH2)
        assert model.nll(0, 0) == pytest.approx(2.0 * math.log(2.0), abs=1e-12)
        assert model.nll(0, 0) == pytest.approx(1.386294, abs=1e-6)

    def test_identity_with_leaf_posterior(self):
        world = make_spectral_world(3, 8, [3.0, 1.5], RandomStream(10))
        corpus = synthetic_corpus(world, 5, RandomStream(11))
        space, _ = codebook_docids(corpus.doc_features, num_stages=3, codebook_size=2, seed=6)
        model = _random_model(world, space, seed=7)
        for q in range(3):
            _, probs = model.leaf_posterior(q)
            for doc in range(8):
                assert model.nll(q, doc) == pytest.approx(-math.log(probs[doc]), abs=1e-12)

    def test_unknown_doc_rejected(self):
        world = world_from_logits(np.zeros((1, 4)))
        model = _uniform_model(world, BINARY_DEPTH2)
        with pytest.raises(DomainError):
            model.nll(0, 9)


class TestExactConstructor:
    def test_hand_computed_subtree_masses(self):
        model = GenerativeRetriever.exact(_hand_world(), BINARY_DEPTH2)
        trie = model.trie_
        _, root = model.node_conditional(0, 0)
        assert_allclose(root, [0.5, 0.5], atol=1e-12)
        _, left = model.node_conditional(0, trie.children[0][0])
        assert_allclose(left, [0.8, 0.2], atol=1e-12)
        _, right = model.node_conditional(0, trie.children[0][1])
        assert_allclose(right, [0.6, 0.4], atol=1e-12)

    def test_one_hot_posterior_on_path_conditionals_are_one(self):
        from retrieval_lab.world import GroundTruthPosterior

        posterior = np.array([[0.0, 0.0, 1.0, 0.0]])
        with np.errstate(divide="ignore"):
            logp = np.log(posterior)
        world = GroundTruthPosterior(
            logits=logp,
            posterior=posterior,
            log_posterior=logp,
            posterior_cdf=np.cumsum(posterior, axis=1),
        )
        model = GenerativeRetriever.exact(world, BINARY_DEPTH2)
        node = 0
        for token in BINARY_DEPTH2.docids[2]:
            tokens, probs = model.node_conditional(0, node)
            assert probs[list(tokens).index(token)] == pytest.approx(1.0, abs=1e-12)
            node = model.trie_.children[node][token]
        assert model.nll(0, 2) == pytest.approx(0.0, abs=1e-12)
        # Dead subtrees fall back to uniform but stay decode-unreachable.
        docs, _, _ = model.constrained_beam_search(0, beam_width=4, k=1)
        assert list(docs) == [2]

    def test_tv_zero_per_query(self):
        world = make_spectral_world(6, 16, [5.0, 2.0, 1.0], RandomStream(12))
        corpus = synthetic_corpus(world, 8, RandomStream(13))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=4, seed=8)
        model = GenerativeRetriever.exact(world, space)
        for q in range(6):
            _, probs = model.leaf_posterior(q)
            assert tv_distance(world.posterior[q], probs) <= 1e-12

    def test_doc_count_mismatch_rejected(self):
        world = world_from_logits(np.zeros((1, 3)))
        with pytest.raises(DomainError):
            GenerativeRetriever.exact(world, BINARY_DEPTH2)


class TestTraining:
    def _training_setup(self):
        logits = np.zeros((8, 16))
        logits[np.arange(8), np.arange(8)] = 4.0
        world = world_from_logits(logits)
        corpus = synthetic_corpus(world, 8, RandomStream(5))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=4, seed=1)
        return world, space

    def test_reaches_small_kl_against_enumerated_posterior(self):
        world, space = self._training_setup()
        model = GenerativeRetriever(steps=100_000, learning_rate=0.02, seed=4).fit(world, space)
        kls, ces = [], []
        for q in range(world.num_queries):
            _, probs = model.leaf_posterior(q)
            kls.append(kl_divergence(world.posterior[q], probs))
            ces.append(float(-(world.posterior[q] * np.log(probs)).sum()))
        entropy = float(np.mean([-(p * np.log(p)).sum() for p in world.posterior]))
        assert float(np.mean(kls)) < 0.01
        assert float(np.mean(ces)) >= entropy - 0.02
        assert float(np.mean(ces)) >= entropy - 1e-12  # CE = H + KL, KL >= 0

    def test_zero_learning_rate_freezes_parameters(self):
        world, space = self._training_setup()
        trained = GenerativeRetriever(steps=500, learning_rate=0.0, init_scale=0.3, seed=9).fit(world, space)
        frozen = GenerativeRetriever(steps=0, learning_rate=0.0, init_scale=0.3, seed=9).fit(world, space)
        for key, value in trained.parameters().items():
            assert np.array_equal(value, frozen.parameters()[key])

    def test_same_seed_reproduces_parameters(self):
        world, space = self._training_setup()
        a = GenerativeRetriever(steps=2000, learning_rate=0.1, seed=13).fit(world, space)
        b = GenerativeRetriever(steps=2000, learning_rate=0.1, seed=13).fit(world, space)
        for key, value in a.parameters().items():
            assert np.array_equal(value, b.parameters()[key])

    def test_featurized_training_runs_and_normalizes(self):
        world, space = self._training_setup()
        corpus = synthetic_corpus(world, 8, RandomStream(5))
        model = GenerativeRetriever(mode="featurized", steps=2000, learning_rate=0.05, seed=2).fit(
            world, space, corpus=corpus
        )
        for q in range(8):
            _, probs = model.leaf_posterior(q)
            assert abs(probs.sum() - 1.0) <= 1e-10


class TestBeamSearch:
    def test_depth_one_choice_returns_argmax_of_root(self):
        space = DocidSpace(scheme="codebook", base_alphabet=3, docids=((0, 3), (1, 3), (2, 3)))
        world = world_from_logits(np.log(np.array([[0.2, 0.5, 0.3]])))
        model = GenerativeRetriever.exact(world, space)
        docs, logps, probs = model.constrained_beam_search(0, beam_width=3, k=1)
        assert list(docs) == [1]
        assert probs[0] == pytest.approx(0.5, abs=1e-12)

    def test_wide_beam_matches_enumeration(self):
        world = make_spectral_world(4, 16, [4.0, 2.0], RandomStream(14))
        corpus = synthetic_corpus(world, 8, RandomStream(15))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=4, seed=10)
        model = _random_model(world, space, seed=11)
        for q in range(4):
            docs, logps, probs = model.constrained_beam_search(q, beam_width=16, k=16)
            _, post = model.leaf_posterior(q)
            oracle = np.lexsort((np.arange(16), -post))
            assert np.array_equal(docs, oracle)
            assert_allclose(probs, post[oracle], atol=1e-12)

    def test_k_above_pool_clamps_with_warning(self):
        world = world_from_logits(np.zeros((1, 4)))
        model = _uniform_model(world, BINARY_DEPTH2)
        with pytest.warns(UserWarning, match="clamp"):
            docs, _, _ = model.constrained_beam_search(0, beam_width=8, k=9)
        assert len(docs) == 4

    def test_emits_only_valid_documents(self):
        total = 0
        draws = 0
        while total < 10_000:
            draws += 1
            stream = RandomStream(1000 + draws)
            n = int(4 + (draws % 5) * 7)
            world = make_spectral_world(5, n, [3.0, 1.0], stream)
            corpus = synthetic_corpus(world, 6, stream.split(1))
            space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=4, seed=draws)
            model = _random_model(world, space, seed=draws)
            trie = model.trie_
            for q in range(5):
                docs, _, _ = model.constrained_beam_search(q, beam_width=4, k=min(4, n))
                for d in docs:
                    assert 0 <= d < n
                    assert trie.accepts(space.docids[d])
                assert len(set(docs.tolist())) == len(docs)
                total += len(docs)

    def test_restricted_view_only_emits_pool_docs(self):
        world = make_spectral_world(3, 8, [3.0], RandomStream(16))
        corpus = synthetic_corpus(world, 6, RandomStream(17))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=3, seed=12)
        model = _random_model(world, space, seed=13)
        view = model.view([1, 4, 6])
        for q in range(3):
            docs, _, _ = model.constrained_beam_search(q, beam_width=3, k=3, view=view)
            assert set(docs.tolist()) <= {1, 4, 6}


class TestRestrictedViews:
    def test_complete_subtree_view_renormalizes_exactly(self):
        # Masking renormalizes per node, so restriction to a whole subtree
        # (here: every docid starting with token 0) reproduces the
        # conditional posterior exactly. Arbitrary subsets do not (the masked
        # siblings still carry out-of-pool mass), which is what the pool
        # stress experiments measure.
        world = _hand_world()
        model = GenerativeRetriever.exact(world, BINARY_DEPTH2)
        view = model.view([0, 1])
        docs, probs = model.leaf_posterior(0, view=view)
        assert list(docs) == [0, 1]
        assert_allclose(probs, [0.8, 0.2], atol=1e-12)

    def test_arbitrary_subset_view_is_a_distribution_over_the_pool(self):
        world = make_spectral_world(4, 12, [4.0, 1.5], RandomStream(18))
        corpus = synthetic_corpus(world, 8, RandomStream(19))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=4, seed=14)
        model = GenerativeRetriever.exact(world, space)
        subset = [0, 3, 5, 9, 11]
        view = model.view(subset)
        for q in range(4):
            docs, probs = model.leaf_posterior(q, view=view)
            assert list(docs) == subset
            assert abs(probs.sum() - 1.0) <= 1e-10
            assert model.nll(q, 3, view=view) == pytest.approx(
                -math.log(probs[1]), abs=1e-12
            )


class TestGradients:
    def _check(self, model, q, doc, tol=1e-5):
        loss, grads = model.loss_and_grads(q, doc)
        vec, layout = pack_arrays(model.parameters())

        def f(v):
            model.set_parameters(unpack_arrays(v, layout))
            return model.loss_and_grads(q, doc)[0]

        numeric = finite_diff_grad(f, vec)
        model.set_parameters(unpack_arrays(vec, layout))
        analytic = pack_arrays(grads)[0]
        assert gradient_relative_error(analytic, numeric) < tol

    def test_tabular_gradients(self):
        world = make_spectral_world(3, 8, [3.0, 1.0], RandomStream(20))
        corpus = synthetic_corpus(world, 5, RandomStream(21))
        space, _ = codebook_docids(corpus.doc_features, num_stages=3, codebook_size=2, seed=15)
        model = _random_model(world, space, seed=16)
        self._check(model, 1, 5)

    def test_featurized_gradients(self):
        world = make_spectral_world(3, 8, [3.0, 1.0], RandomStream(22))
        corpus = synthetic_corpus(world, 5, RandomStream(23))
        space, _ = codebook_docids(corpus.doc_features, num_stages=2, codebook_size=3, seed=17)
        model = GenerativeRetriever(mode="featurized", steps=0, init_scale=0.4, seed=18).fit(
            world, space, corpus=corpus
        )
        self._check(model, 2, 3)
