"""Autoregressive retrieval over docid tries.

The model stores one logit vector per trie node (query-conditioned), and the
probability of a document is the product of child conditionals along its docid
path. All softmaxes run over the children admitted by a TrieView, so the same
trained parameters serve any document pool: restricting the pool renormalizes
the model instead of retraining it. Decoding is length-synchronous beam
search; finished leaves stay in the beam and compete on total log probability.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .docid import DocidSpace, Trie, TrieView, build_trie
from .numerics import logsumexp
from .rng import RandomStream
from .validation import (
    BudgetError,
    DomainError,
    TrainingDivergedError,
    check_count,
    check_index,
    check_positive,
)


class GenerativeRetriever(BaseEstimator):
    """Trie-structured sequence model over docids.

    Parameters are keyed by trie node: tabular mode keeps a free
    (num_queries, num_children) table per node; featurized mode keeps a linear
    map from query features to child logits per node. Training minimizes the
    negative log-likelihood of sampled (query, docid) paths by SGD.
    """

    def __init__(
        self,
        mode="tabular",
        steps=2000,
        learning_rate=0.5,
        log_every=100,
        init_scale=0.0,
        leaf_token_budget=1_000_000,
        seed=0,
    ):
        self.mode = mode
        self.steps = steps
        self.learning_rate = learning_rate
        self.log_every = log_every
        self.init_scale = init_scale
        self.leaf_token_budget = leaf_token_budget
        self.seed = seed

    # ---------------------------------------------------------------- setup

    def _check_config(self):
        if self.mode not in ("tabular", "featurized"):
            raise DomainError(f"mode must be tabular or featurized, got {self.mode!r}")
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        check_count(self.log_every, "log_every")
        check_positive(self.leaf_token_budget, "leaf_token_budget")

    def _attach(self, space: DocidSpace, trie: Trie, num_queries: int):
        self.space_ = space
        self.trie_ = trie
        self.num_queries_ = num_queries
        self.num_docs_ = space.num_docs
        self.node_tokens_ = []
        self.node_children_ = []
        for node in range(trie.num_nodes):
            items = sorted(trie.children[node].items())
            self.node_tokens_.append(np.asarray([t for t, _ in items], dtype=np.int64))
            self.node_children_.append(np.asarray([c for _, c in items], dtype=np.int64))
        self.path_cache_ = {}
        for doc, tokens in enumerate(space.docids):
            node, path = 0, []
            for token in tokens:
                pos = int(np.searchsorted(self.node_tokens_[node], token))
                path.append((node, pos))
                node = trie.children[node][token]
            self.path_cache_[doc] = tuple(path)

    def _init_params(self, query_dim, gen):
        scale = float(self.init_scale)
        params: dict[str, np.ndarray] = {}
        for node in range(self.trie_.num_nodes):
            deg = len(self.node_tokens_[node])
            if deg == 0:
                continue
            if self.mode == "tabular":
                shape = (self.num_queries_, deg)
                params[f"node_{node}_logits"] = (
                    gen.standard_normal(shape) * scale if scale > 0 else np.zeros(shape)
                )
            else:
                params[f"node_{node}_w"] = (
                    gen.standard_normal((deg, query_dim)) * (scale / math.sqrt(query_dim))
                    if scale > 0
                    else np.zeros((deg, query_dim))
                )
                params[f"node_{node}_b"] = np.zeros(deg)
        return params

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this GenerativeRetriever instance is not fitted yet")

    def view(self, doc_subset=None) -> TrieView:
        """A pool restriction of this model's trie."""
        self._require_fitted()
        return TrieView(self.trie_, self.space_, doc_subset)

    # --------------------------------------------------------- conditionals

    def _node_logits(self, q: int, node: int) -> np.ndarray:
        if self.mode == "tabular":
            return self.params_[f"node_{node}_logits"][q]
        return self.params_[f"node_{node}_w"] @ self.query_features_[q] + self.params_[f"node_{node}_b"]

    def _active_positions(self, view: TrieView, node: int) -> np.ndarray:
        tokens = np.asarray([t for t, _ in view.active_children[node]], dtype=np.int64)
        return np.searchsorted(self.node_tokens_[node], tokens)

    def node_conditional(self, q: int, node: int, view: TrieView | None = None) -> tuple[np.ndarray, np.ndarray]:
        """(child tokens, probabilities) at a node, masked to the view's pool.

        A single admitted child gets probability 1; if every admitted logit is
        -inf (zero-mass branch of an exact model) the fallback is uniform.
        """
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        view = view or self.view()
        if not 0 <= node < self.trie_.num_nodes:
            raise DomainError(f"node {node} outside trie of {self.trie_.num_nodes} nodes")
        kids = view.active_children[node]
        if not kids:
            raise DomainError(f"node {node} has no active children under this view")
        tokens = np.asarray([t for t, _ in kids], dtype=np.int64)
        logits = self._node_logits(q, node)[self._active_positions(view, node)]
        if np.all(np.isinf(logits) & (logits < 0)):
            probs = np.full(len(kids), 1.0 / len(kids))
        else:
            probs = np.exp(logits - logsumexp(logits))
        return tokens, probs

    def _path_log_probs(self, q: int, view: TrieView, docs) -> np.ndarray:
        """Log model probability of each doc's full docid under the view."""
        node_log = {}
        out = np.empty(len(docs))
        for i, doc in enumerate(docs):
            total = 0.0
            for node, pos in self.path_cache_[doc]:
                if node not in node_log:
                    active = self._active_positions(view, node)
                    logits = self._node_logits(q, node)[active]
                    if np.all(np.isinf(logits) & (logits < 0)):
                        row = np.full(len(active), -math.log(len(active)))
                    else:
                        row = logits - logsumexp(logits)
                    node_log[node] = (active, row)
                active, row = node_log[node]
                total += row[int(np.searchsorted(active, pos))]
            out[i] = total
        return out

    def leaf_posterior(self, q: int, view: TrieView | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Exact model posterior over the view's documents.

        Enumerates every active docid, so it refuses pools whose total token
        count exceeds leaf_token_budget; use constrained_beam_search there.
        """
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        view = view or self.view()
        docs = np.asarray(sorted(view.active_docs), dtype=np.int64)
        total_tokens = sum(len(self.space_.docids[d]) for d in docs)
        if total_tokens > self.leaf_token_budget:
            raise BudgetError(
                f"enumerating {total_tokens} leaf tokens exceeds the budget of "
                f"{self.leaf_token_budget}; use constrained_beam_search instead"
            )
        log_probs = self._path_log_probs(q, view, docs)
        return docs, np.exp(log_probs)

    def nll(self, q: int, doc: int, view: TrieView | None = None) -> float:
        """Negative log-likelihood of one docid: the sequence training loss."""
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        doc = check_index(doc, "doc", self.num_docs_)
        view = view or self.view()
        if doc not in view.active_docs:
            raise DomainError(f"doc {doc} is not active under this view")
        return float(-self._path_log_probs(q, view, [doc])[0])

    # -------------------------------------------------------------- training

    def fit(self, world, space: DocidSpace, corpus=None, doc_subset=None):
        """SGD on the path NLL of positives drawn from the world's posterior."""
        self._check_config()
        if space.num_docs != world.num_docs:
            raise DomainError("docid space and world disagree on document count")
        self._attach(space, build_trie(space), world.num_queries)
        if self.mode == "featurized":
            if corpus is None:
                raise DomainError("featurized mode requires a corpus with query features")
            self.query_features_ = np.asarray(corpus.query_features, dtype=np.float64)
            if self.query_features_.shape[0] != world.num_queries:
                raise DomainError("corpus query features do not match the world")
            qdim = self.query_features_.shape[1]
        else:
            qdim = 0
        stream = RandomStream(self.seed)
        self.params_ = self._init_params(qdim, stream.split(0).generator())
        view = self.view(doc_subset)
        docs = np.asarray(sorted(view.active_docs), dtype=np.int64)
        sub = world.posterior[:, docs]
        totals = sub.sum(axis=1, keepdims=True)
        if np.any(totals <= 0):
            raise DomainError("doc_subset has zero posterior mass for some query")
        cdf = np.cumsum(sub / totals, axis=1)

        gen = stream.split(1).generator()
        lr = float(self.learning_rate)
        self.loss_history_ = []
        window_sum, window_len = 0.0, 0
        for step in range(self.steps):
            q = int(gen.integers(0, world.num_queries))
            doc = int(docs[np.searchsorted(cdf[q], gen.random(), side="right")])
            loss = self._sgd_step(q, doc, view, lr)
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            window_sum += loss
            window_len += 1
            if window_len == self.log_every or step == self.steps - 1:
                self.loss_history_.append((step + 1, window_sum / window_len))
                window_sum, window_len = 0.0, 0
        return self

    def _sgd_step(self, q, doc, view, lr) -> float:
        loss = 0.0
        for node, pos in self.path_cache_[doc]:
            active = self._active_positions(view, node)
            logits = self._node_logits(q, node)[active]
            log_row = logits - logsumexp(logits)
            local = int(np.searchsorted(active, pos))
            loss -= log_row[local]
            g = np.exp(log_row)
            g[local] -= 1.0
            if self.mode == "tabular":
                self.params_[f"node_{node}_logits"][q, active] -= lr * g
            else:
                x = self.query_features_[q]
                self.params_[f"node_{node}_w"][active] -= lr * np.outer(g, x)
                b = self.params_[f"node_{node}_b"]
                b[active] -= lr * g
        return loss

    # ---------------------------------------------------- loss/grad access

    def loss_and_grads(self, q, doc, view=None):
        """Path NLL plus dense gradients for every parameter array."""
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        doc = check_index(doc, "doc", self.num_docs_)
        view = view or self.view()
        grads = {name: np.zeros_like(arr) for name, arr in self.params_.items()}
        loss = 0.0
        for node, pos in self.path_cache_[doc]:
            active = self._active_positions(view, node)
            logits = self._node_logits(q, node)[active]
            log_row = logits - logsumexp(logits)
            local = int(np.searchsorted(active, pos))
            loss -= float(log_row[local])
            g = np.exp(log_row)
            g[local] -= 1.0
            if self.mode == "tabular":
                grads[f"node_{node}_logits"][q, active] += g
            else:
                grads[f"node_{node}_w"][active] += np.outer(g, self.query_features_[q])
                grads[f"node_{node}_b"][active] += g
        return loss, grads

    def parameters(self) -> dict[str, np.ndarray]:
        self._require_fitted()
        return self.params_

    def set_parameters(self, params: dict[str, np.ndarray]):
        self._require_fitted()
        for name, arr in params.items():
            self.params_[name] = np.asarray(arr, dtype=np.float64).reshape(self.params_[name].shape)

    def trainable_parameter_count(self) -> int:
        self._require_fitted()
        return int(sum(arr.size for arr in self.params_.values()))

    # --------------------------------------------------------------- exact

    @classmethod
    def exact(cls, world, space: DocidSpace) -> "GenerativeRetriever":
        """Model whose leaf posterior reproduces the world exactly.

        Each node's child logits are the log subtree masses of the posterior,
        so the softmax yields the mass ratio p(child | node, q). Zero-mass
        children get -inf; nodes with no mass at all fall back to uniform
        (zero logits) so every docid stays reachable.
        """
        if space.num_docs != world.num_docs:
            raise DomainError(
                f"docid space covers {space.num_docs} docs, world has {world.num_docs}"
            )
        model = cls(mode="tabular", steps=0)
        model._check_config()
        trie = build_trie(space)
        model._attach(space, trie, world.num_queries)
        mass = np.zeros((world.num_queries, trie.num_nodes))
        order = sorted(range(trie.num_nodes), key=lambda v: -trie.depth[v])
        for node in order:
            doc = trie.leaf_doc[node]
            if doc is not None:
                mass[:, node] = world.posterior[:, doc]
            kids = model.node_children_[node]
            if len(kids) > 0:
                mass[:, node] += mass[:, kids].sum(axis=1)
        params = {}
        with np.errstate(divide="ignore"):
            for node in range(trie.num_nodes):
                kids = model.node_children_[node]
                if len(kids) == 0:
                    continue
                logits = np.log(mass[:, kids])
                dead = mass[:, node] <= 0.0
                logits[dead] = 0.0
                params[f"node_{node}_logits"] = logits
        model.params_ = params
        model.loss_history_ = []
        return model

    # ----------------------------------------------------------------- beam

    def constrained_beam_search(self, q: int, beam_width: int, k: int, view: TrieView | None = None):
        """Top-k documents by model probability, decoded under trie masking.

        Length-synchronous: every round expands all unfinished candidates by
        their admitted children, finished leaves ride along unchanged, and the
        beam is pruned to beam_width by (-log prob, prefix). With beam_width
        at least the pool size the result is exact. Returns (docs, log probs,
        probs) ranked by (-log prob, doc); probs exponentiate the accumulated
        log probs.
        """
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        check_count(beam_width, "beam_width")
        view = view or self.view()
        pool = view.num_active_docs
        if k > pool:
            warnings.warn(f"k={k} exceeds pool size {pool}; clamping to {pool}", stacklevel=2)
            k = pool
        check_count(k, "k")
        node_dist: dict[int, tuple[np.ndarray, np.ndarray]] = {}

        def expand(node):
            if node not in node_dist:
                active = self._active_positions(view, node)
                logits = self._node_logits(q, node)[active]
                if np.all(np.isinf(logits) & (logits < 0)):
                    row = np.full(len(active), -math.log(len(active)))
                else:
                    row = logits - logsumexp(logits)
                kids = np.asarray([c for _, c in view.active_children[node]], dtype=np.int64)
                toks = np.asarray([t for t, _ in view.active_children[node]], dtype=np.int64)
                node_dist[node] = (toks, kids, row)
            return node_dist[node]

        beam = [(0.0, (), 0, None)]  # (log prob, prefix, node, finished doc)
        while any(doc is None for _, _, _, doc in beam):
            grown = []
            for logp, prefix, node, doc in beam:
                if doc is not None:
                    grown.append((logp, prefix, node, doc))
                    continue
                toks, kids, row = expand(node)
                for t, c, lp in zip(toks, kids, row):
                    child_doc = self.trie_.leaf_doc[c]
                    grown.append((logp + lp, prefix + (int(t),), int(c), child_doc))
            grown.sort(key=lambda item: (-item[0], item[1]))
            beam = grown[:beam_width]
        beam.sort(key=lambda item: (-item[0], item[3]))
        top = beam[:k]
        docs = np.asarray([doc for _, _, _, doc in top], dtype=np.int64)
        logps = np.asarray([logp for logp, _, _, _ in top])
        return docs, logps, np.exp(logps)
