"""Bilinear and multi-channel dense retrieval with locally normalized training.

The scorer is S(q, d) = sum over channels of <e_q, e_d>. Training minimizes the
in-batch softmax loss over one positive plus sampled negatives, with plain SGD
at a fixed learning rate so runs are bit-reproducible. Encoders are either free
lookup tables (tabular) or linear maps from feature vectors (featurized), with
an optional two-layer rectifier projection head on both towers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .numerics import log_softmax, logsumexp
from .rng import RandomStream
from .validation import (
    DomainError,
    TrainingDivergedError,
    check_count,
    check_index,
    check_positive,
    check_unit_interval,
)


@dataclass(frozen=True)
class NegativePolicy:
    """How negatives are proposed: uniform, or a hard/uniform mixture."""

    kind: str = "uniform"
    hard_ratio: float = 0.0
    hard_pool_size: int = 32
    refresh_every: int = 100

    def __post_init__(self):
        if self.kind not in ("uniform", "hard_mixture"):
            raise DomainError(f"negative policy kind must be uniform or hard_mixture, got {self.kind!r}")
        check_unit_interval(self.hard_ratio, "hard_ratio")
        check_count(self.hard_pool_size, "hard_pool_size")
        check_count(self.refresh_every, "refresh_every")


def sample_negatives(
    policy: NegativePolicy,
    count: int,
    positive: int,
    num_docs: int,
    gen: np.random.Generator,
    hard_pool=None,
) -> np.ndarray:
    """Draw `count` negatives with replacement.

    Under hard_mixture, floor(hard_ratio * count) come from the hard pool
    (positive already excluded by the caller) and the remainder uniformly from
    the non-positive documents. An exhausted pool falls back to uniform draws.
    """
    check_count(count, "count (K-1)")
    if num_docs < 2:
        raise DomainError("negative sampling needs at least 2 documents")
    n_hard = 0
    if policy.kind == "hard_mixture" and hard_pool is not None and len(hard_pool) > 0:
        n_hard = math.floor(policy.hard_ratio * count)
    out = np.empty(count, dtype=np.int64)
    if n_hard > 0:
        pool = np.asarray(hard_pool, dtype=np.int64)
        out[:n_hard] = pool[gen.integers(0, len(pool), size=n_hard)]
    n_uniform = count - n_hard
    if n_uniform > 0:
        r = gen.integers(0, num_docs - 1, size=n_uniform)
        r += r >= positive
        out[n_hard:] = r
    return out


def _relu(x):
    return np.maximum(x, 0.0)


class DenseRetriever(BaseEstimator):
    """Dual-encoder retriever trained with the in-batch softmax objective.

    Parameters
    ----------
    embedding_dim : per-channel embedding dimension r.
    channels : number of independent interaction channels (1 = standard).
    temperature : softmax temperature applied to scores.
    mode : "tabular" (free per-entity tables) or "featurized" (linear maps on
        corpus feature vectors).
    projection_dim : if set, a two-layer rectifier projection to this dimension
        is appended on both towers and trained jointly.
    projection_hidden : hidden width of the projection (default 2 * max(r, r')).
    projection_init : "random" or "identity" (identity requires r' == r and
        reproduces scores exactly at initialization).
    steps, learning_rate, candidates : SGD budget, fixed step size, and the
        per-step candidate-set size K (one positive + K-1 negatives).
    negative_kind, hard_ratio, hard_pool_size, refresh_every : negative policy.
    log_every : loss-history granularity; entries are means over the interval.
    init_scale : scale of the Gaussian parameter initialization.
    seed : root seed for all training randomness.
    """

    def __init__(
        self,
        embedding_dim=16,
        channels=1,
        temperature=1.0,
        mode="tabular",
        projection_dim=None,
        projection_hidden=None,
        projection_init="random",
        steps=2000,
        learning_rate=0.3,
        candidates=16,
        negative_kind="uniform",
        hard_ratio=0.5,
        hard_pool_size=32,
        refresh_every=100,
        log_every=100,
        init_scale=0.1,
        seed=0,
    ):
        self.embedding_dim = embedding_dim
        self.channels = channels
        self.temperature = temperature
        self.mode = mode
        self.projection_dim = projection_dim
        self.projection_hidden = projection_hidden
        self.projection_init = projection_init
        self.steps = steps
        self.learning_rate = learning_rate
        self.candidates = candidates
        self.negative_kind = negative_kind
        self.hard_ratio = hard_ratio
        self.hard_pool_size = hard_pool_size
        self.refresh_every = refresh_every
        self.log_every = log_every
        self.init_scale = init_scale
        self.seed = seed

    # ---------------------------------------------------------------- setup

    def _check_config(self):
        check_count(self.embedding_dim, "embedding_dim")
        check_count(self.channels, "channels")
        check_positive(self.temperature, "temperature")
        if self.mode not in ("tabular", "featurized"):
            raise DomainError(f"mode must be tabular or featurized, got {self.mode!r}")
        if self.steps < 0:
            raise DomainError("steps must be >= 0")
        check_count(self.candidates, "candidates", minimum=2)

    def _policy(self) -> NegativePolicy:
        return NegativePolicy(
            kind=self.negative_kind,
            hard_ratio=self.hard_ratio,
            hard_pool_size=self.hard_pool_size,
            refresh_every=self.refresh_every,
        )

    def _init_params(self, num_queries, num_docs, query_dim, doc_dim, gen) -> dict:
        c, r = self.channels, self.embedding_dim
        scale = float(self.init_scale)
        params: dict[str, np.ndarray] = {}
        if self.mode == "tabular":
            params["query_table"] = gen.standard_normal((num_queries, c, r)) * scale
            params["doc_table"] = gen.standard_normal((num_docs, c, r)) * scale
        else:
            params["query_map"] = gen.standard_normal((c, r, query_dim)) * (scale / math.sqrt(query_dim))
            params["doc_map"] = gen.standard_normal((c, r, doc_dim)) * (scale / math.sqrt(doc_dim))
        if self.projection_dim is not None:
            params.update(self._init_projection(gen))
        return params

    def _init_projection(self, gen) -> dict:
        r = self.embedding_dim
        rp = check_count(self.projection_dim, "projection_dim")
        if self.projection_init == "identity":
            if rp != r:
                raise DomainError("identity projection requires projection_dim == embedding_dim")
            hidden = 2 * r
            w1 = np.concatenate([np.eye(r), -np.eye(r)], axis=0)
            w2 = np.concatenate([np.eye(r), -np.eye(r)], axis=1)
            out = {}
            for tower in ("query", "doc"):
                out[f"{tower}_proj_w1"] = w1.copy()
                out[f"{tower}_proj_b1"] = np.zeros(hidden)
                out[f"{tower}_proj_w2"] = w2.copy()
                out[f"{tower}_proj_b2"] = np.zeros(rp)
            return out
        if self.projection_init != "random":
            raise DomainError(f"projection_init must be random or identity, got {self.projection_init!r}")
        hidden = self.projection_hidden or 2 * max(r, rp)
        hidden = check_count(hidden, "projection_hidden")
        out = {}
        for tower in ("query", "doc"):
            out[f"{tower}_proj_w1"] = gen.standard_normal((hidden, r)) / math.sqrt(r)
            out[f"{tower}_proj_b1"] = np.zeros(hidden)
            out[f"{tower}_proj_w2"] = gen.standard_normal((rp, hidden)) / math.sqrt(hidden)
            out[f"{tower}_proj_b2"] = np.zeros(rp)
        return out

    @classmethod
    def from_tables(cls, query_table, doc_table, temperature=1.0, **kwargs):
        """Fitted tabular model over explicit embedding tables.

        Tables may be (entities, r) for single-channel or (entities, c, r).
        """
        q = np.asarray(query_table, dtype=np.float64)
        d = np.asarray(doc_table, dtype=np.float64)
        if q.ndim == 2:
            q = q[:, None, :]
        if d.ndim == 2:
            d = d[:, None, :]
        if q.shape[1:] != d.shape[1:]:
            raise DomainError(f"table channel/dim mismatch: {q.shape} vs {d.shape}")
        model = cls(
            embedding_dim=q.shape[2],
            channels=q.shape[1],
            temperature=temperature,
            mode="tabular",
            **kwargs,
        )
        model._check_config()
        model.params_ = {"query_table": q.copy(), "doc_table": d.copy()}
        model.num_queries_ = q.shape[0]
        model.num_docs_ = d.shape[0]
        model.loss_history_ = []
        return model

    # ------------------------------------------------------------- encoding

    def _require_fitted(self):
        if not hasattr(self, "params_"):
            raise NotFittedError("this DenseRetriever instance is not fitted yet")

    def _has_projection(self) -> bool:
        return "query_proj_w1" in self.params_

    def _project(self, base, tower):
        """Apply the tower's projection head to (..., c, r) embeddings."""
        p = self.params_
        z1 = base @ p[f"{tower}_proj_w1"].T + p[f"{tower}_proj_b1"]
        h = _relu(z1)
        out = h @ p[f"{tower}_proj_w2"].T + p[f"{tower}_proj_b2"]
        return out, (base, z1, h)

    def _query_base(self, q_indices):
        if self.mode == "tabular":
            return self.params_["query_table"][q_indices]
        x = self.query_features_[q_indices]
        return np.einsum("crf,...f->...cr", self.params_["query_map"], x)

    def _doc_base(self, d_indices):
        if self.mode == "tabular":
            return self.params_["doc_table"][d_indices]
        x = self.doc_features_[d_indices]
        return np.einsum("crf,...f->...cr", self.params_["doc_map"], x)

    def query_embeddings(self, q_indices=None):
        self._require_fitted()
        if q_indices is None:
            q_indices = np.arange(self.num_queries_)
        base = self._query_base(q_indices)
        return self._project(base, "query")[0] if self._has_projection() else base

    def doc_embeddings(self, d_indices=None):
        self._require_fitted()
        if d_indices is None:
            d_indices = np.arange(self.num_docs_)
        base = self._doc_base(d_indices)
        return self._project(base, "doc")[0] if self._has_projection() else base

    # --------------------------------------------------------------- scoring

    def score(self, q: int, d: int) -> float:
        """S(q, d): sum over channels of per-channel inner products."""
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        d = check_index(d, "d", self.num_docs_)
        eq = self.query_embeddings(np.asarray([q]))[0]
        ed = self.doc_embeddings(np.asarray([d]))[0]
        return float(np.sum(eq * ed))

    def score_matrix(self, doc_indices=None) -> np.ndarray:
        self._require_fitted()
        eq = self.query_embeddings()
        ed = self.doc_embeddings(doc_indices)
        return np.einsum("mcr,ncr->mn", eq, ed)

    def retrieve(self, q: int, k: int, doc_indices=None):
        """Exact top-k for one query: (doc indices, scores, probabilities).

        Ties break toward the lower doc index. Probabilities are the full
        softmax of scores / temperature over the entire candidate pool.
        """
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        pool = np.arange(self.num_docs_) if doc_indices is None else np.asarray(doc_indices, dtype=np.int64)
        if not 1 <= k <= len(pool):
            raise DomainError(f"k must be in [1, {len(pool)}], got {k}")
        eq = self.query_embeddings(np.asarray([q]))[0]
        ed = self.doc_embeddings(pool)
        scores = np.einsum("cr,ncr->n", eq, ed)
        log_probs = scores / self.temperature
        log_probs = log_probs - logsumexp(log_probs)
        order = np.argsort(-scores, kind="stable")[:k]
        return pool[order], scores[order], np.exp(log_probs[order])

    # -------------------------------------------------------------- training

    def fit(self, world, corpus=None, doc_subset=None):
        """Train on pairs sampled from the world's posterior.

        corpus supplies feature vectors in featurized mode. doc_subset, if
        given, restricts positives, negatives, and hard pools to that document
        subset (the rest of the corpus stays scoreable but untrained).
        """
        self._check_config()
        m, n = world.num_queries, world.num_docs
        if self.mode == "featurized":
            if corpus is None:
                raise DomainError("featurized mode requires a corpus with feature vectors")
            self.query_features_ = np.asarray(corpus.query_features, dtype=np.float64)
            self.doc_features_ = np.asarray(corpus.doc_features, dtype=np.float64)
            if self.query_features_.shape[0] != m or self.doc_features_.shape[0] != n:
                raise DomainError("corpus feature counts do not match the world")
            qdim, ddim = self.query_features_.shape[1], self.doc_features_.shape[1]
        else:
            qdim = ddim = 0
        stream = RandomStream(self.seed)
        self.params_ = self._init_params(m, n, qdim, ddim, stream.split(0).generator())
        self.num_queries_ = m
        self.num_docs_ = n

        subset = None if doc_subset is None else np.asarray(sorted(doc_subset), dtype=np.int64)
        if subset is not None and len(subset) < 2:
            raise DomainError("doc_subset must contain at least 2 documents")
        cdf, pool_posterior, pool_docs = self._positive_cdf(world, subset)

        policy = self._policy()
        gen = stream.split(1).generator()
        lr = float(self.learning_rate)
        k_neg = self.candidates - 1
        hard_pools = None
        self.loss_history_ = []
        for step in range(self.steps):
            if policy.kind == "hard_mixture" and step % policy.refresh_every == 0:
                hard_pools = self._refresh_hard_pools(policy, pool_docs)
            q = int(gen.integers(0, m))
            pos = int(pool_docs[np.searchsorted(cdf[q], gen.random(), side="right")])
            negs = self._sample_step_negatives(policy, k_neg, q, pos, pool_docs, gen, hard_pools)
            loss = self._sgd_step(q, pos, negs, lr)
            if not np.isfinite(loss):
                raise TrainingDivergedError(step, loss)
            if (step + 1) % self.log_every == 0 or step == self.steps - 1:
                # Log the deterministic pool cross-entropy, not the sampled
                # step loss: the descent property is stated on this series.
                self.loss_history_.append(
                    (step + 1, self._pool_cross_entropy(pool_posterior, pool_docs))
                )
        return self

    def _positive_cdf(self, world, subset):
        if subset is None:
            pool_docs = np.arange(world.num_docs)
            return world.posterior_cdf, world.posterior, pool_docs
        sub = world.posterior[:, subset]
        totals = sub.sum(axis=1, keepdims=True)
        if np.any(totals <= 0):
            raise DomainError("doc_subset has zero posterior mass for some query")
        renorm = sub / totals
        return np.cumsum(renorm, axis=1), renorm, subset

    def _pool_cross_entropy(self, pool_posterior, pool_docs) -> float:
        logp = log_softmax(self.score_matrix(pool_docs) / self.temperature, axis=1)
        return float(-np.mean(np.sum(pool_posterior * logp, axis=1)))

    def _refresh_hard_pools(self, policy, pool_docs):
        scores = self.score_matrix(pool_docs)
        width = min(policy.hard_pool_size + 1, len(pool_docs))
        top = np.argsort(-scores, axis=1, kind="stable")[:, :width]
        return pool_docs[top]

    def _sample_step_negatives(self, policy, count, q, positive, pool_docs, gen, hard_pools):
        pool = None
        if hard_pools is not None:
            row = hard_pools[q]
            pool = row[row != positive][: policy.hard_pool_size]
        if len(pool_docs) == self.num_docs_ and (pool_docs == np.arange(self.num_docs_)).all():
            return sample_negatives(policy, count, positive, self.num_docs_, gen, pool)
        # Restricted pool: draw positions within the subset, then map to doc ids.
        pos_in_pool = int(np.searchsorted(pool_docs, positive))
        raw = sample_negatives(policy, count, pos_in_pool, len(pool_docs), gen, None if pool is None else np.searchsorted(pool_docs, pool))
        return pool_docs[raw]

    def _sgd_step(self, q, pos, negs, lr) -> float:
        cand = np.concatenate([[pos], negs]).astype(np.int64)
        loss, parts = self._loss_parts(q, cand)
        p = self.params_
        if self.mode == "tabular":
            p["query_table"][q] -= lr * parts["g_query_base"]
            np.subtract.at(p["doc_table"], cand, lr * parts["g_doc_base"])
        else:
            p["query_map"] -= lr * np.einsum("cr,f->crf", parts["g_query_base"], self.query_features_[q])
            p["doc_map"] -= lr * np.einsum("kcr,kf->crf", parts["g_doc_base"], self.doc_features_[cand])
        for name, grad in parts["g_proj"].items():
            p[name] -= lr * grad
        return loss

    def _loss_parts(self, q, cand):
        """In-batch softmax loss and gradients w.r.t. base embeddings and projection."""
        p = self.params_
        eq_base = self._query_base(q)
        ed_base = self._doc_base(cand)
        if self._has_projection():
            eq, q_cache = self._project(eq_base, "query")
            ed, d_cache = self._project(ed_base, "doc")
        else:
            eq, ed = eq_base, ed_base
        scaled = np.einsum("cr,kcr->k", eq, ed) / self.temperature
        lse = logsumexp(scaled)
        loss = float(lse - scaled[0])
        g_scores = np.exp(scaled - lse)
        g_scores[0] -= 1.0
        g_scores /= self.temperature
        g_eq = np.einsum("k,kcr->cr", g_scores, ed)
        g_ed = g_scores[:, None, None] * eq[None, :, :]
        g_proj: dict[str, np.ndarray] = {}
        if self._has_projection():
            g_eq = self._projection_backward(g_eq, q_cache, "query", g_proj)
            g_ed = self._projection_backward(g_ed, d_cache, "doc", g_proj)
        return loss, {"g_query_base": g_eq, "g_doc_base": g_ed, "g_proj": g_proj}

    def _projection_backward(self, g_out, cache, tower, g_proj):
        p = self.params_
        base, z1, h = cache
        w1, w2 = p[f"{tower}_proj_w1"], p[f"{tower}_proj_w2"]
        flat = (-1,)
        g_out2 = g_out.reshape(flat + g_out.shape[-1:])
        h2 = h.reshape(flat + h.shape[-1:])
        base2 = base.reshape(flat + base.shape[-1:])
        mask = (z1 > 0).reshape(h2.shape)
        g_h = (g_out2 @ w2) * mask
        g_proj[f"{tower}_proj_w2"] = g_out2.T @ h2
        g_proj[f"{tower}_proj_b2"] = g_out2.sum(axis=0)
        g_proj[f"{tower}_proj_w1"] = g_h.T @ base2
        g_proj[f"{tower}_proj_b1"] = g_h.sum(axis=0)
        return (g_h @ w1).reshape(base.shape)

    # ------------------------------------------------- loss/grad inspection

    def loss_and_grads(self, q, positive, negatives):
        """Loss plus dense gradients for every parameter array (for checks)."""
        self._require_fitted()
        q = check_index(q, "q", self.num_queries_)
        negs = np.asarray(negatives, dtype=np.int64)
        if negs.size == 0:
            raise DomainError("negatives must be non-empty")
        cand = np.concatenate([[positive], negs]).astype(np.int64)
        loss, parts = self._loss_parts(q, cand)
        grads = {name: np.zeros_like(arr) for name, arr in self.params_.items()}
        if self.mode == "tabular":
            grads["query_table"][q] += parts["g_query_base"]
            np.add.at(grads["doc_table"], cand, parts["g_doc_base"])
        else:
            grads["query_map"] += np.einsum("cr,f->crf", parts["g_query_base"], self.query_features_[q])
            grads["doc_map"] += np.einsum("kcr,kf->crf", parts["g_doc_base"], self.doc_features_[cand])
        for name, grad in parts["g_proj"].items():
            grads[name] += grad
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

    def add_projection(self, projection_dim, projection_hidden=None, init="random", seed=None):
        """Return a copy with a projection head appended on both towers."""
        self._require_fitted()
        if self._has_projection():
            raise DomainError("model already has a projection head")
        clone = DenseRetriever(**self.get_params())
        clone.projection_dim = projection_dim
        clone.projection_hidden = projection_hidden
        clone.projection_init = init
        clone.params_ = {k: v.copy() for k, v in self.params_.items()}
        clone.num_queries_ = self.num_queries_
        clone.num_docs_ = self.num_docs_
        clone.loss_history_ = list(self.loss_history_)
        if self.mode == "featurized":
            clone.query_features_ = self.query_features_
            clone.doc_features_ = self.doc_features_
        gen = RandomStream(self.seed if seed is None else seed).split(7).generator()
        clone.params_.update(clone._init_projection(gen))
        return clone
