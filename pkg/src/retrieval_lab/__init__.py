"""A desk-scale laboratory for dense and generative retrieval.

Small, fully seeded worlds with known posteriors; dense dual encoders and
trie-structured generative retrievers trained on them; and mechanical checks
of the calibration, capacity, and tail-bound claims the two paradigms differ
on. Everything is reproducible from a config and a root seed.
"""

from .config import apply_overrides, load_config, parse_config
from .dense import DenseRetriever, NegativePolicy, sample_negatives
from .docid import (
    DocidSpace,
    ResidualQuantizer,
    Trie,
    TrieView,
    assign_unique_docids,
    build_trie,
    codebook_docids,
    text_docids,
)
from .evaluation import (
    RankedRun,
    brier_score,
    gold_documents,
    hits_at_k,
    kl_divergence,
    mean_posterior_kl,
    mrr_at_k,
    ndcg_at_k,
    run_brier,
    run_from_dense,
    run_from_generative,
    tv_distance,
)
from .experiments import (
    ExperimentResult,
    Table,
    build_world,
    emit_report,
    evaluate_model,
    geometric_spectrum,
    run_experiment,
    train_model,
)
from .generative import GenerativeRetriever
from .numerics import (
    finite_diff_grad,
    gradient_relative_error,
    log_softmax,
    logsumexp,
    numerical_rank,
    softmax,
    svd,
)
from .rng import RandomStream
from .theory import (
    CeKlReport,
    EckartYoungReport,
    GapReport,
    TailReport,
    ce_kl_decomposition,
    check_bernstein_tail,
    eckart_young_check,
    estimate_delta,
    estimate_gap,
    exact_delta,
    partition_functions,
    proposal_distribution,
)
from .validation import BudgetError, ConfigError, DomainError, TrainingDivergedError
from .world import (
    Corpus,
    GroundTruthPosterior,
    TrainingPair,
    gaussian_features,
    ingest_tsv,
    make_spectral_world,
    one_hot_features,
    sample_positive_docs,
    sample_training_pairs,
    synthetic_corpus,
    world_from_corpus,
    world_from_logits,
)

__version__ = "0.1.0"

__all__ = [
    "BudgetError",
    "CeKlReport",
    "ConfigError",
    "Corpus",
    "DenseRetriever",
    "DocidSpace",
    "DomainError",
    "EckartYoungReport",
    "ExperimentResult",
    "GapReport",
    "GenerativeRetriever",
    "GroundTruthPosterior",
    "NegativePolicy",
    "RandomStream",
    "RankedRun",
    "ResidualQuantizer",
    "Table",
    "TailReport",
    "TrainingDivergedError",
    "TrainingPair",
    "Trie",
    "TrieView",
    "apply_overrides",
    "assign_unique_docids",
    "brier_score",
    "build_trie",
    "build_world",
    "ce_kl_decomposition",
    "check_bernstein_tail",
    "codebook_docids",
    "eckart_young_check",
    "emit_report",
    "estimate_delta",
    "estimate_gap",
    "evaluate_model",
    "exact_delta",
    "finite_diff_grad",
    "gaussian_features",
    "geometric_spectrum",
    "gold_documents",
    "gradient_relative_error",
    "hits_at_k",
    "ingest_tsv",
    "kl_divergence",
    "load_config",
    "log_softmax",
    "logsumexp",
    "make_spectral_world",
    "mean_posterior_kl",
    "mrr_at_k",
    "ndcg_at_k",
    "numerical_rank",
    "one_hot_features",
    "parse_config",
    "partition_functions",
    "proposal_distribution",
    "run_brier",
    "run_experiment",
    "run_from_dense",
    "run_from_generative",
    "sample_negatives",
    "sample_positive_docs",
    "sample_training_pairs",
    "softmax",
    "svd",
    "synthetic_corpus",
    "text_docids",
    "train_model",
    "tv_distance",
    "world_from_corpus",
    "world_from_logits",
]
