import numpy as np
import pytest
from numpy.testing import assert_allclose

from retrieval_lab.rng import RandomStream
from retrieval_lab.validation import DomainError
from retrieval_lab.world import (
    ingest_tsv,
    make_spectral_world,
    ngram_hash_locations,
    sample_training_pairs,
    spectrum_recovered,
    synthetic_corpus,
    world_from_corpus,
    world_from_logits,
)


class TestSpectralWorld:
    def test_requested_spectrum_is_recovered(self):
        s = np.array([4.0, 2.0, 1.0, 0.5])
        world = make_spectral_world(8, 16, s, RandomStream(0))
        assert_allclose(spectrum_recovered(world)[:4], s, atol=1e-8)
        assert_allclose(spectrum_recovered(world)[4:], 0.0, atol=1e-8)

    def test_posterior_rows_are_distributions(self):
        world = make_spectral_world(6, 12, [3.0, 1.0], RandomStream(1))
        assert_allclose(world.posterior.sum(axis=1), np.ones(6), atol=1e-12)
        assert np.all(world.posterior >= 0)

    def test_increasing_spectrum_rejected(self):
        with pytest.raises(DomainError):
            make_spectral_world(4, 4, [1.0, 2.0], RandomStream(0))

    def test_negative_singular_value_rejected(self):
        with pytest.raises(DomainError):
            make_spectral_world(4, 4, [1.0, -0.5], RandomStream(0))

    def test_spectrum_longer_than_min_dim_rejected(self):
        with pytest.raises(DomainError):
            make_spectral_world(2, 4, [3.0, 2.0, 1.0], RandomStream(0))

    def test_same_stream_reproduces_world(self):
        a = make_spectral_world(5, 7, [2.0, 1.0], RandomStream(42))
        b = make_spectral_world(5, 7, [2.0, 1.0], RandomStream(42))
        assert np.array_equal(a.logits, b.logits)


class TestSampling:
    def test_single_query_counts_within_binomial_bands(self):
        world = world_from_logits(np.log(np.array([[0.5, 0.25, 0.125, 0.125]])))
        n = 200_000
        pairs = sample_training_pairs(world, n, RandomStream(7))
        counts = np.bincount([p.positive_doc for p in pairs], minlength=4)
        for d, prob in enumerate(world.posterior[0]):
            sd = np.sqrt(n * prob * (1 - prob))
            assert abs(counts[d] - n * prob) <= 3 * sd

    def test_positive_marginal_close_in_total_variation(self):
        world = make_spectral_world(2, 64, [24.0, 12.0], RandomStream(3))
        n = 100_000
        pairs = sample_training_pairs(world, n, RandomStream(8))
        joint = np.zeros((2, 64))
        for p in pairs:
            joint[p.query_index, p.positive_doc] += 1
        for q in range(2):
            total = joint[q].sum()
            empirical = joint[q] / total
            tv = 0.5 * np.abs(empirical - world.posterior[q]).sum()
            assert tv <= 0.02

    def test_queries_cover_all_indices(self):
        world = make_spectral_world(6, 8, [2.0], RandomStream(4))
        pairs = sample_training_pairs(world, 5000, RandomStream(9))
        assert set(p.query_index for p in pairs) == set(range(6))


class TestIngestTsv(object):
    def _write(self, tmp_path, name, text):
        path = tmp_path / name
        path.write_text(text, encoding="utf-8")
        return path

    def test_malformed_line_error_names_line_number(self, tmp_path):
        path = self._write(tmp_path, "docs.tsv", "d1\talpha\nbroken-line\n")
        with pytest.raises(DomainError, match="line 2"):
            ingest_tsv(path, 32, 2)

    def test_duplicate_id_rejected(self, tmp_path):
        path = self._write(tmp_path, "docs.tsv", "d1\talpha\nd1\tbeta\n")
        with pytest.raises(DomainError, match="duplicate id"):
            ingest_tsv(path, 32, 2)

    def test_empty_text_yields_zero_vector(self, tmp_path):
        path = self._write(tmp_path, "docs.tsv", "d1\t\nd2\tbeta\n")
        corpus = ingest_tsv(path, 32, 2)
        assert_allclose(corpus.doc_features[0], np.zeros(32), atol=0)

    def test_collision_free_pair_is_orthogonal(self, tmp_path):
        dim = 4096
        texts = ["alpha", "beta", "gamma", "zq", "xv", "wp"]
        chosen = None
        for i in range(len(texts)):
            for j in range(i + 1, len(texts)):
                a = ngram_hash_locations(texts[i], dim, 2)
                b = ngram_hash_locations(texts[j], dim, 2)
                if not a & b:
                    chosen = (texts[i], texts[j])
                    break
            if chosen:
                break
        assert chosen is not None, "corpus of short words should contain a collision-free pair"
        path = self._write(tmp_path, "docs.tsv", f"d1\t{chosen[0]}\nd2\t{chosen[1]}\n")
        corpus = ingest_tsv(path, dim, 2)
        assert float(corpus.doc_features[0] @ corpus.doc_features[1]) == pytest.approx(0.0, abs=1e-15)

    def test_self_retrieval_default_and_separate_queries(self, tmp_path):
        docs = self._write(tmp_path, "docs.tsv", "d1\talpha\nd2\tbeta\n")
        queries = self._write(tmp_path, "queries.tsv", "q1\talpha beta\n")
        self_corpus = ingest_tsv(docs, 64, 2)
        assert self_corpus.query_ids == self_corpus.doc_ids
        other = ingest_tsv(docs, 64, 2, queries)
        assert other.query_ids == ("q1",)
        assert other.query_features.shape == (1, 64)

    def test_blank_lines_skipped(self, tmp_path):
        path = self._write(tmp_path, "docs.tsv", "d1\talpha\n\nd2\tbeta\n")
        corpus = ingest_tsv(path, 16, 2)
        assert corpus.doc_ids == ("d1", "d2")


class TestWorldFromCorpus:
    def test_self_retrieval_prefers_own_document(self, tmp_path):
        path = tmp_path / "docs.tsv"
        path.write_text("d1\tred apples\nd2\tblue fish\nd3\tgreen grass\n", encoding="utf-8")
        corpus = ingest_tsv(path, 256, 3)
        world = world_from_corpus(corpus, relevance_temperature=0.1)
        assert list(np.argmax(world.posterior, axis=1)) == [0, 1, 2]

    def test_synthetic_corpus_matches_world_shape(self):
        world = make_spectral_world(5, 9, [2.0], RandomStream(2))
        corpus = synthetic_corpus(world, 13, RandomStream(3))
        assert corpus.doc_features.shape == (9, 13)
        assert corpus.query_features.shape == (5, 13)
        assert len(corpus.doc_texts) == 9
