"""Document identifiers as token sequences, plus the prefix trie over them.

Two schemes produce base token sequences: residual quantization of document
vectors (fixed length, alphabet B) and raw UTF-8 bytes of document text
(variable length, alphabet 256). Either way, duplicates are disambiguated by
appending base-B occurrence-rank digits, and a sentinel token (id = alphabet
size) terminates every docid, which makes the final code prefix-free.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .rng import RandomStream
from .validation import DomainError, as_matrix, check_count, check_positive


# ------------------------------------------------------------ quantization


def _kmeans_plus_plus(x, k, gen):
    """Seed k centroids: first uniform, then proportional to squared distance."""
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    first = int(gen.integers(0, n))
    centroids[0] = x[first]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centroids[i:] = 0.0
            break
        probs = d2 / total
        pick = int(gen.choice(n, p=probs))
        centroids[i] = x[pick]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))
    return centroids


def _assign(x, centroids):
    """Nearest-centroid assignment; ties go to the lowest centroid index."""
    d2 = np.sum(x * x, axis=1)[:, None] - 2.0 * (x @ centroids.T) + np.sum(centroids * centroids, axis=1)[None, :]
    return np.argmin(d2, axis=1)


def _lloyd(x, k, gen, max_iter, tol):
    distinct = np.unique(x, axis=0)
    if len(distinct) < k:
        warnings.warn(
            f"only {len(distinct)} distinct points for {k} centroids; surplus centroids set to zero",
            stacklevel=3,
        )
        centroids = np.zeros((k, x.shape[1]))
        centroids[: len(distinct)] = distinct
        return centroids, _assign(x, centroids)
    centroids = _kmeans_plus_plus(x, k, gen)
    prev_cost = np.inf
    assigned = _assign(x, centroids)
    for _ in range(max_iter):
        for j in range(k):
            members = x[assigned == j]
            if len(members) > 0:
                centroids[j] = members.mean(axis=0)
        assigned = _assign(x, centroids)
        diffs = x - centroids[assigned]
        cost = float(np.sum(diffs * diffs))
        if prev_cost - cost <= tol * max(prev_cost, 1.0):
            break
        prev_cost = cost
    return centroids, assigned


class ResidualQuantizer(BaseEstimator):
    """Multi-stage vector quantizer: each stage k-means-fits the residuals.

    Encoding picks the nearest centroid per stage (ties to the lowest index);
    decoding sums the selected centroids, so the reconstruction error equals
    the final-stage residual.
    """

    def __init__(self, num_stages=6, codebook_size=256, max_iter=50, tol=1e-9, seed=0):
        self.num_stages = num_stages
        self.codebook_size = codebook_size
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def fit(self, X):
        check_count(self.num_stages, "num_stages")
        check_count(self.codebook_size, "codebook_size")
        check_count(self.max_iter, "max_iter")
        check_positive(self.tol, "tol")
        x = as_matrix(X, "X")
        stream = RandomStream(self.seed)
        residual = x.copy()
        codebooks = np.empty((self.num_stages, self.codebook_size, x.shape[1]))
        codes = np.empty((x.shape[0], self.num_stages), dtype=np.int64)
        self.stage_mse_ = []
        for stage in range(self.num_stages):
            gen = stream.split(stage).generator()
            centroids, assigned = _lloyd(residual, self.codebook_size, gen, self.max_iter, self.tol)
            codebooks[stage] = centroids
            codes[:, stage] = assigned
            residual = residual - centroids[assigned]
            self.stage_mse_.append(float(np.mean(np.sum(residual * residual, axis=1))))
        self.codebooks_ = codebooks
        self.codes_ = codes
        return self

    def _require_fitted(self):
        if not hasattr(self, "codebooks_"):
            raise NotFittedError("this ResidualQuantizer instance is not fitted yet")

    def encode(self, X) -> np.ndarray:
        self._require_fitted()
        x = as_matrix(X, "X")
        if x.shape[1] != self.codebooks_.shape[2]:
            raise DomainError(f"expected dimension {self.codebooks_.shape[2]}, got {x.shape[1]}")
        residual = x.copy()
        codes = np.empty((x.shape[0], self.num_stages), dtype=np.int64)
        for stage in range(self.num_stages):
            assigned = _assign(residual, self.codebooks_[stage])
            codes[:, stage] = assigned
            residual = residual - self.codebooks_[stage][assigned]
        return codes

    def decode(self, codes) -> np.ndarray:
        self._require_fitted()
        codes = np.asarray(codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[1] != self.num_stages:
            raise DomainError(f"codes must be (n, {self.num_stages}), got {codes.shape}")
        if codes.min() < 0 or codes.max() >= self.codebook_size:
            raise DomainError("code indices out of range")
        out = np.zeros((codes.shape[0], self.codebooks_.shape[2]))
        for stage in range(self.num_stages):
            out += self.codebooks_[stage][codes[:, stage]]
        return out

    def transform(self, X) -> np.ndarray:
        return self.encode(X)


# --------------------------------------------------------- unique docids


def _rank_digits(rank: int, base: int) -> tuple[int, ...]:
    """Minimal-length base-`base` big-endian digits of `rank` (0 -> (0,))."""
    if rank == 0:
        return (0,)
    digits = []
    while rank > 0:
        digits.append(rank % base)
        rank //= base
    return tuple(reversed(digits))


def assign_unique_docids(sequences, base_alphabet: int) -> list[tuple[int, ...]]:
    """Disambiguate duplicate token sequences and terminate with a sentinel.

    Docs sharing a sequence get their occurrence rank (0, 1, 2, ... in input
    order) appended as base-alphabet digits. Appending can create fresh ties
    against other docs' sequences, so resolution repeats until all sequences
    are distinct; only then is the sentinel (token id = base_alphabet) added.
    """
    check_count(base_alphabet, "base_alphabet", minimum=2)
    ids = [tuple(int(t) for t in seq) for seq in sequences]
    for tokens in ids:
        if any(t < 0 or t >= base_alphabet for t in tokens):
            raise DomainError(f"token out of range [0, {base_alphabet}) in sequence {tokens}")
    for _ in range(64):
        groups: dict[tuple[int, ...], list[int]] = {}
        for i, t in enumerate(ids):
            groups.setdefault(t, []).append(i)
        dup_groups = [idxs for idxs in groups.values() if len(idxs) > 1]
        if not dup_groups:
            break
        for idxs in dup_groups:
            for rank, i in enumerate(idxs):
                ids[i] = ids[i] + _rank_digits(rank, base_alphabet)
    else:
        raise RuntimeError("docid disambiguation did not converge in 64 passes")
    sentinel = base_alphabet
    return [t + (sentinel,) for t in ids]


@dataclass(frozen=True)
class DocidSpace:
    """A corpus's docids: one prefix-free token sequence per document."""

    scheme: str
    base_alphabet: int
    docids: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        if self.scheme not in ("codebook", "text"):
            raise DomainError(f"scheme must be codebook or text, got {self.scheme!r}")
        seen = {}
        for doc, tokens in enumerate(self.docids):
            if tokens[-1] != self.sentinel:
                raise DomainError(f"docid for doc {doc} does not end with the sentinel")
            if any(t < 0 or t > self.sentinel for t in tokens) or self.sentinel in tokens[:-1]:
                raise DomainError(f"docid for doc {doc} has tokens outside the alphabet")
            if tokens in seen:
                raise DomainError(f"docs {seen[tokens]} and {doc} share a docid")
            seen[tokens] = doc

    @property
    def sentinel(self) -> int:
        return self.base_alphabet

    @property
    def alphabet_size(self) -> int:
        return self.base_alphabet + 1

    @property
    def num_docs(self) -> int:
        return len(self.docids)

    @property
    def max_length(self) -> int:
        return max(len(t) for t in self.docids)

    def doc_for(self, tokens) -> int | None:
        return {t: i for i, t in enumerate(self.docids)}.get(tuple(tokens))

    def to_json(self) -> str:
        payload = {
            "scheme": self.scheme,
            "base_alphabet": self.base_alphabet,
            "sentinel": self.sentinel,
            "max_length": self.max_length,
            "docids": [list(t) for t in self.docids],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DocidSpace":
        payload = json.loads(text)
        return cls(
            scheme=payload["scheme"],
            base_alphabet=int(payload["base_alphabet"]),
            docids=tuple(tuple(int(t) for t in seq) for seq in payload["docids"]),
        )


def codebook_docids(doc_vectors, num_stages=6, codebook_size=256, seed=0) -> tuple[DocidSpace, ResidualQuantizer]:
    """Quantize document vectors into fixed-length codes and disambiguate."""
    rq = ResidualQuantizer(num_stages=num_stages, codebook_size=codebook_size, seed=seed)
    rq.fit(doc_vectors)
    unique = assign_unique_docids([tuple(row) for row in rq.codes_], codebook_size)
    return DocidSpace("codebook", codebook_size, tuple(unique)), rq


def text_docids(doc_texts) -> DocidSpace:
    """Docids from raw UTF-8 bytes of each document's text."""
    base = [tuple(text.encode("utf-8")) for text in doc_texts]
    unique = assign_unique_docids(base, 256)
    return DocidSpace("text", 256, tuple(unique))


# ------------------------------------------------------------------- trie


@dataclass
class Trie:
    """Prefix trie over a DocidSpace; node 0 is the root, leaves carry docs.

    children[v] maps token id to child node id. Because docids are
    prefix-free, leaves have no children and every internal node has at least
    one child.
    """

    children: list[dict[int, int]] = field(default_factory=lambda: [{}])
    leaf_doc: list[int | None] = field(default_factory=lambda: [None])
    depth: list[int] = field(default_factory=lambda: [0])

    @property
    def num_nodes(self) -> int:
        return len(self.children)

    @property
    def num_leaves(self) -> int:
        return sum(1 for d in self.leaf_doc if d is not None)

    def _add(self, tokens, doc: int):
        node = 0
        for token in tokens:
            nxt = self.children[node].get(token)
            if nxt is None:
                nxt = len(self.children)
                self.children[node][token] = nxt
                self.children.append({})
                self.leaf_doc.append(None)
                self.depth.append(self.depth[node] + 1)
            node = nxt
        if self.leaf_doc[node] is not None or self.children[node]:
            raise DomainError(f"docid for doc {doc} collides inside the trie")
        self.leaf_doc[node] = doc

    def accepts(self, tokens) -> bool:
        """True when the token sequence is exactly one document's docid."""
        node = 0
        for token in tokens:
            nxt = self.children[node].get(int(token))
            if nxt is None:
                return False
            node = nxt
        return self.leaf_doc[node] is not None

    def walk(self, tokens) -> int:
        node = 0
        for token in tokens:
            nxt = self.children[node].get(int(token))
            if nxt is None:
                raise DomainError(f"prefix {tuple(tokens)} leaves the trie")
            node = nxt
        return node

    def leaves(self) -> list[tuple[int, tuple[int, ...]]]:
        """(doc, docid tokens) pairs in depth-first, token-sorted order."""
        out = []
        stack = [(0, ())]
        while stack:
            node, prefix = stack.pop()
            if self.leaf_doc[node] is not None:
                out.append((self.leaf_doc[node], prefix))
            for token in sorted(self.children[node], reverse=True):
                stack.append((self.children[node][token], prefix + (token,)))
        return out


def build_trie(space: DocidSpace) -> Trie:
    trie = Trie()
    for doc, tokens in enumerate(space.docids):
        trie._add(tokens, doc)
    return trie


class TrieView:
    """Restriction of a trie to the subtree spanned by a document subset.

    Masks each node's children to those leading to at least one active leaf,
    so a model trained over the full trie can be renormalized onto any pool
    without retraining.
    """

    def __init__(self, trie: Trie, space: DocidSpace, doc_subset=None):
        self.trie = trie
        self.space = space
        if doc_subset is None:
            active_docs = set(range(space.num_docs))
        else:
            active_docs = {int(d) for d in doc_subset}
            for d in active_docs:
                if not 0 <= d < space.num_docs:
                    raise DomainError(f"doc {d} outside corpus of {space.num_docs}")
            if not active_docs:
                raise DomainError("doc_subset must be non-empty")
        self.active_docs = active_docs
        alive = np.zeros(trie.num_nodes, dtype=bool)
        for doc in active_docs:
            node = 0
            alive[0] = True
            for token in space.docids[doc]:
                node = trie.children[node][token]
                alive[node] = True
        self.alive = alive
        self.active_children: list[list[tuple[int, int]]] = []
        for node in range(trie.num_nodes):
            kids = [(t, c) for t, c in sorted(trie.children[node].items()) if alive[c]]
            self.active_children.append(kids)

    @property
    def num_active_docs(self) -> int:
        return len(self.active_docs)

    def active_leaves(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(doc, tokens) for doc, tokens in self.trie.leaves() if doc in self.active_docs]
