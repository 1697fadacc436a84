"""Ground-truth worlds with controllable spectra, pair sampling, and TSV ingestion.

A world fixes the quantity both retrieval paradigms are estimating: a posterior
P*(d|q) over a finite corpus, defined as the row softmax of a logit matrix whose
spectrum the caller controls. Training pairs are (query, positive) draws from it.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .numerics import log_softmax, svd
from .rng import RandomStream
from .validation import DomainError, as_matrix, check_count


@dataclass(frozen=True)
class GroundTruthPosterior:
    logits: np.ndarray
    posterior: np.ndarray
    log_posterior: np.ndarray = field(repr=False)
    posterior_cdf: np.ndarray = field(repr=False)

    @property
    def num_queries(self) -> int:
        return self.logits.shape[0]

    @property
    def num_docs(self) -> int:
        return self.logits.shape[1]


@dataclass(frozen=True)
class TrainingPair:
    query_index: int
    positive_doc: int


@dataclass(frozen=True)
class Corpus:
    """Feature vectors for documents and queries, with optional raw text."""

    doc_features: np.ndarray
    query_features: np.ndarray
    doc_ids: tuple[str, ...] = ()
    doc_texts: tuple[str, ...] = ()
    query_ids: tuple[str, ...] = ()
    query_texts: tuple[str, ...] = ()

    @property
    def feature_dim(self) -> int:
        return self.doc_features.shape[1]


def world_from_logits(logits) -> GroundTruthPosterior:
    """Wrap an explicit logit matrix as a world (posterior = row softmax)."""
    arr = as_matrix(logits, "logits")
    logp = log_softmax(arr, axis=1)
    posterior = np.exp(logp)
    cdf = np.cumsum(posterior, axis=1)
    return GroundTruthPosterior(logits=arr, posterior=posterior, log_posterior=logp, posterior_cdf=cdf)


def make_spectral_world(
    num_queries: int, num_docs: int, singular_values, stream: RandomStream
) -> GroundTruthPosterior:
    """World whose logit matrix has exactly the requested singular values.

    logits = U diag(s) V^T with U, V drawn orthonormal from the stream, so the
    spectral tail of the target is a free experimental knob.
    """
    m = check_count(num_queries, "num_queries")
    n = check_count(num_docs, "num_docs")
    s = np.asarray(singular_values, dtype=np.float64).reshape(-1)
    if s.size == 0 or s.size > min(m, n):
        raise DomainError(f"spectrum length must be in [1, min(m, N)] = [1, {min(m, n)}], got {s.size}")
    if np.any(s < 0) or np.any(np.diff(s) > 0):
        raise DomainError("singular values must be non-increasing and non-negative")
    gen = stream.generator()
    u, _ = np.linalg.qr(gen.standard_normal((m, s.size)))
    v, _ = np.linalg.qr(gen.standard_normal((n, s.size)))
    logits = (u * s) @ v.T
    return world_from_logits(logits)


def sample_positive_docs(world: GroundTruthPosterior, query_indices: np.ndarray, gen: np.random.Generator) -> np.ndarray:
    """Vectorized draws d ~ P*(.|q) for an array of query indices."""
    u = gen.random(len(query_indices))
    docs = np.empty(len(query_indices), dtype=np.int64)
    for q in np.unique(query_indices):
        mask = query_indices == q
        docs[mask] = np.searchsorted(world.posterior_cdf[q], u[mask], side="right")
    return np.minimum(docs, world.num_docs - 1)


def sample_training_pairs(world: GroundTruthPosterior, n: int, stream: RandomStream) -> list[TrainingPair]:
    check_count(n, "n")
    gen = stream.generator()
    queries = gen.integers(0, world.num_queries, size=n)
    docs = sample_positive_docs(world, queries, gen)
    return [TrainingPair(int(q), int(d)) for q, d in zip(queries, docs)]


def gaussian_features(count: int, dim: int, stream: RandomStream) -> np.ndarray:
    """Seeded Gaussian feature vectors for featurized models on synthetic worlds."""
    check_count(count, "count")
    check_count(dim, "dim")
    return stream.generator().standard_normal((count, dim))


def one_hot_features(count: int) -> np.ndarray:
    return np.eye(check_count(count, "count"))


def synthetic_corpus(world: GroundTruthPosterior, feature_dim: int, stream: RandomStream) -> Corpus:
    """Gaussian query/document features aligned with a synthetic world."""
    doc_features = gaussian_features(world.num_docs, feature_dim, stream.split(1))
    query_features = gaussian_features(world.num_queries, feature_dim, stream.split(2))
    width = len(str(max(world.num_docs - 1, 1)))
    return Corpus(
        doc_features=doc_features,
        query_features=query_features,
        doc_ids=tuple(f"D{i:0{width}d}" for i in range(world.num_docs)),
        doc_texts=tuple(f"synthetic document {i:0{width}d}" for i in range(world.num_docs)),
        query_ids=tuple(f"Q{i:0{width}d}" for i in range(world.num_queries)),
        query_texts=tuple(f"synthetic query {i:0{width}d}" for i in range(world.num_queries)),
    )


def _ngram_vector(text: str, feature_dim: int, ngram_max: int) -> np.ndarray:
    """Signed hashed character n-grams (n = 1..ngram_max), L2-normalized."""
    v = np.zeros(feature_dim, dtype=np.float64)
    for n in range(1, ngram_max + 1):
        for i in range(len(text) - n + 1):
            gram = text[i : i + n].encode("utf-8")
            digest = hashlib.blake2b(gram, digest_size=8).digest()
            h = int.from_bytes(digest, "big")
            sign = 1.0 if h & (1 << 63) else -1.0
            v[(h & ((1 << 63) - 1)) % feature_dim] += sign
    norm = np.linalg.norm(v)
    if norm > 0:
        v /= norm
    return v


def ngram_hash_locations(text: str, feature_dim: int, ngram_max: int) -> set[int]:
    """Hash buckets a text touches; lets tests construct collision-free pairs."""
    out: set[int] = set()
    for n in range(1, ngram_max + 1):
        for i in range(len(text) - n + 1):
            gram = text[i : i + n].encode("utf-8")
            h = int.from_bytes(hashlib.blake2b(gram, digest_size=8).digest(), "big")
            out.add((h & ((1 << 63) - 1)) % feature_dim)
    return out


def _read_tsv(path, what: str) -> tuple[list[str], list[str]]:
    ids: list[str] = []
    texts: list[str] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if line == "":
                continue
            parts = line.split("\t")
            if len(parts) != 2 or parts[0] == "":
                raise DomainError(f"{what}: malformed TSV at line {lineno}: expected 'id<TAB>text'")
            ident, text = parts
            if ident in seen:
                raise DomainError(f"{what}: duplicate id {ident!r} at line {lineno}")
            seen.add(ident)
            ids.append(ident)
            texts.append(text)
    if not ids:
        raise DomainError(f"{what}: no records in {path}")
    return ids, texts


def ingest_tsv(docs_path, feature_dim: int, ngram_max: int, queries_path=None) -> Corpus:
    """Load `id<TAB>text` corpora into hashed n-gram feature vectors.

    When no query file is given the documents double as queries
    (self-retrieval), which is the desk default for text worlds.
    """
    check_count(feature_dim, "feature_dim")
    check_count(ngram_max, "ngram_max")
    doc_ids, doc_texts = _read_tsv(docs_path, "docs")
    doc_features = np.stack([_ngram_vector(t, feature_dim, ngram_max) for t in doc_texts])
    if queries_path is None:
        query_ids, query_texts, query_features = doc_ids, doc_texts, doc_features
    else:
        query_ids, query_texts = _read_tsv(queries_path, "queries")
        query_features = np.stack([_ngram_vector(t, feature_dim, ngram_max) for t in query_texts])
    return Corpus(
        doc_features=doc_features,
        query_features=query_features,
        doc_ids=tuple(doc_ids),
        doc_texts=tuple(doc_texts),
        query_ids=tuple(query_ids),
        query_texts=tuple(query_texts),
    )


def world_from_corpus(corpus: Corpus, relevance_temperature: float = 0.1) -> GroundTruthPosterior:
    """Synthetic relevance posterior over a text corpus.

    Logits are feature similarities sharpened by a temperature; with the
    self-retrieval corpus this concentrates each query's posterior on its own
    document while keeping lexically close distractors competitive.
    """
    if relevance_temperature <= 0:
        raise DomainError("relevance_temperature must be positive")
    logits = corpus.query_features @ corpus.doc_features.T / relevance_temperature
    return world_from_logits(logits)


def spectrum_recovered(world: GroundTruthPosterior) -> np.ndarray:
    return svd(world.logits).s
