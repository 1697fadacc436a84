"""Experiment drivers: build a world, train retrievers, measure, report.

Each experiment kind produces named tables of plain rows plus a summary.
Everything is seeded through one RandomStream, so a config determines the
report bytes exactly; wall-clock time is never written into tables.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import evaluation, theory
from .dense import DenseRetriever
from .docid import codebook_docids, text_docids
from .generative import GenerativeRetriever
from .numerics import softmax
from .rng import RandomStream
from .validation import BudgetError, ConfigError
from .world import (
    ingest_tsv,
    make_spectral_world,
    synthetic_corpus,
    world_from_corpus,
)


@dataclass
class Table:
    columns: list
    rows: list


@dataclass
class ExperimentResult:
    kind: str
    config: dict
    tables: dict[str, Table]
    summary: dict
    failures: list = field(default_factory=list)
    timings: dict = field(default_factory=dict)


class Deadline:
    """Wall-clock budget; stages call check() and overruns raise BudgetError."""

    def __init__(self, max_seconds=None):
        self.start = time.monotonic()
        self.max_seconds = max_seconds

    def check(self, where: str):
        if self.max_seconds is not None:
            elapsed = time.monotonic() - self.start
            if elapsed > self.max_seconds:
                raise BudgetError(
                    f"budget of {self.max_seconds}s exceeded after {elapsed:.1f}s at {where}"
                )


def _check_step_budget(config, steps: int, where: str):
    cap = config["budget"]["max_steps"]
    if cap is not None and steps > cap:
        raise BudgetError(f"{where} needs {steps} steps but budget.max_steps is {cap}")


def geometric_spectrum(rank: int, decay: float, scale: float, num_queries: int, num_docs: int) -> np.ndarray:
    """Geometric singular values normalized so the logit RMS equals `scale`."""
    s = decay ** np.arange(rank)
    s *= scale * math.sqrt(num_queries * num_docs / float(np.sum(s * s)))
    return s


def build_world(config: dict, stream: RandomStream, num_docs=None):
    """(world, corpus) per the config's world section."""
    w = config["world"]
    if w["kind"] == "tsv":
        if not w["docs_path"]:
            raise ConfigError("world.docs_path is required when world.kind is tsv")
        corpus = ingest_tsv(w["docs_path"], w["feature_dim"], w["ngram_max"], w["queries_path"])
        return world_from_corpus(corpus, w["relevance_temperature"]), corpus
    n = num_docs or w["num_docs"]
    rank = min(w["rank"], w["num_queries"], n)
    spectrum = geometric_spectrum(rank, w["spectrum_decay"], w["logit_scale"], w["num_queries"], n)
    world = make_spectral_world(w["num_queries"], n, spectrum, stream.split(1))
    return world, synthetic_corpus(world, w["feature_dim"], stream.split(2))


def make_docid_space(config: dict, corpus, paradigm=None):
    paradigm = paradigm or config["model"]["paradigm"]
    if paradigm == "gr_text":
        if not corpus.doc_texts:
            raise ConfigError("gr_text needs a corpus with document texts")
        return text_docids(corpus.doc_texts)
    m = config["model"]
    space, _ = codebook_docids(
        corpus.doc_features,
        num_stages=m["num_stages"],
        codebook_size=m["codebook_size"],
        seed=config["seed"],
    )
    return space


def train_model(config: dict, world, corpus, doc_subset=None, paradigm=None, **overrides):
    """Train the configured paradigm; overrides patch single model fields."""
    m = {**config["model"], **overrides}
    paradigm = paradigm or m["paradigm"]
    seed = config["seed"]
    if paradigm in ("dr", "mvdr"):
        _check_step_budget(config, m["steps"], paradigm)
        model = DenseRetriever(
            embedding_dim=m["embedding_dim"],
            channels=1 if paradigm == "dr" else m["channels"],
            temperature=m["temperature"],
            mode=m["mode"],
            projection_dim=m["projection_dim"],
            projection_hidden=m["projection_hidden"],
            projection_init=m["projection_init"],
            steps=m["steps"],
            learning_rate=m["learning_rate"],
            candidates=config["experiment"]["K"],
            negative_kind=m["negative_kind"],
            hard_ratio=m["hard_ratio"],
            hard_pool_size=m["hard_pool_size"],
            refresh_every=m["refresh_every"],
            log_every=m["log_every"],
            init_scale=m["init_scale"],
            seed=seed,
        )
        return model.fit(world, corpus=corpus, doc_subset=doc_subset)
    if paradigm in ("gr_codebook", "gr_text"):
        _check_step_budget(config, m["steps"], paradigm)
        space = overrides.get("docid_space") or make_docid_space(config, corpus, paradigm)
        model = GenerativeRetriever(
            mode=m["mode"],
            steps=m["steps"],
            learning_rate=m["learning_rate"],
            log_every=m["log_every"],
            init_scale=0.0,
            seed=seed,
        )
        return model.fit(world, space, corpus=corpus, doc_subset=doc_subset)
    raise ConfigError(f"model.paradigm {paradigm!r} is not recognized")


def restricted_posterior(world, pool) -> np.ndarray:
    """World posterior renormalized onto a sorted document pool."""
    sub = world.posterior[:, pool]
    return sub / sub.sum(axis=1, keepdims=True)


def evaluate_model(model, world, config: dict, pool=None, gold=None) -> dict:
    """Ranking and calibration metrics for one fitted retriever."""
    pool = np.arange(world.num_docs) if pool is None else np.asarray(sorted(pool), dtype=np.int64)
    if gold is None:
        gold = np.asarray(
            [pool[int(np.argmax(world.posterior[q][pool]))] for q in range(world.num_queries)]
        )
    eval_k = min(config["experiment"]["eval_k"], len(pool))
    target = restricted_posterior(world, pool)
    if isinstance(model, DenseRetriever):
        run = evaluation.run_from_dense(model, eval_k, doc_indices=pool, gold=gold)
        probs = softmax(model.score_matrix(pool) / model.temperature, axis=1)
    else:
        view = model.view(pool if len(pool) < world.num_docs else None)
        beam = min(len(pool), 256)
        run = evaluation.run_from_generative(model, eval_k, beam_width=beam, view=view, gold=gold)
        probs = np.stack([model.leaf_posterior(q, view)[1] for q in range(world.num_queries)])
    kls = [evaluation.kl_divergence(target[q], probs[q]) for q in range(world.num_queries)]
    tvs = [evaluation.tv_distance(target[q], probs[q]) for q in range(world.num_queries)]
    finite = [v for v in kls if math.isfinite(v)]
    return {
        "hits_at_1": evaluation.hits_at_k(run, 1),
        f"hits_at_{eval_k}": evaluation.hits_at_k(run, eval_k),
        f"mrr_at_{eval_k}": evaluation.mrr_at_k(run, eval_k),
        f"ndcg_at_{eval_k}": evaluation.ndcg_at_k(run, eval_k),
        "brier": evaluation.run_brier(run),
        "mean_kl": float(np.mean(finite)) if finite else math.inf,
        "mean_tv": float(np.mean(tvs)),
    }


def _final_loss(model) -> float:
    return model.loss_history_[-1][1] if model.loss_history_ else math.nan


# ------------------------------------------------------------ experiments


def _single(config, stream, deadline):
    timings = {}
    tick = time.monotonic()
    world, corpus = build_world(config, stream)
    deadline.check("world build")
    timings["world"] = time.monotonic() - tick
    tick = time.monotonic()
    model = train_model(config, world, corpus)
    deadline.check("training")
    timings["train"] = time.monotonic() - tick
    tick = time.monotonic()
    metrics = evaluate_model(model, world, config)
    timings["evaluate"] = time.monotonic() - tick
    columns = ["paradigm", "K", *metrics.keys(), "final_loss"]
    row = [config["model"]["paradigm"], config["experiment"]["K"], *metrics.values(), _final_loss(model)]
    return ExperimentResult(
        kind="single",
        config=config,
        tables={"metrics": Table(columns, [row])},
        summary={"paradigm": config["model"]["paradigm"], **metrics},
        timings=timings,
    ), model


def _grid_sweep(config, stream, deadline, kind, grid, override_key, column):
    """Shared driver for sweeps that re-train one model per grid value."""
    timings = {}
    tick = time.monotonic()
    world, corpus = build_world(config, stream)
    deadline.check("world build")
    timings["world"] = time.monotonic() - tick
    rows = []
    columns = None
    for value in grid:
        tick = time.monotonic()
        cfg = config
        if override_key == "K":
            cfg = {**config, "experiment": {**config["experiment"], "K": value}}
            model = train_model(cfg, world, corpus)
        elif override_key == "hard_ratio":
            model = train_model(config, world, corpus, negative_kind="hard_mixture", hard_ratio=value)
        else:
            model = train_model(config, world, corpus, **{override_key: value})
        metrics = evaluate_model(model, world, cfg)
        if columns is None:
            columns = [column, *metrics.keys(), "final_loss"]
        rows.append([value, *metrics.values(), _final_loss(model)])
        deadline.check(f"{kind} at {column}={value}")
        timings[f"{column}={value}"] = time.monotonic() - tick
    return ExperimentResult(
        kind=kind,
        config=config,
        tables={kind: Table(columns, rows)},
        summary={"grid": list(grid), "paradigm": config["model"]["paradigm"]},
        timings=timings,
    )


def _corpus_scaling(config, stream, deadline):
    """Train both paradigms on a base pool, then dilute it with distractors.

    The dense side is featurized so unseen distractors land in the learned
    score space; the generative side keeps its full-inventory trie and is
    evaluated through progressively larger views. Gold labels are fixed on
    the base pool, so any metric drop is pure distractor interference.
    """
    exp = config["experiment"]
    pools = [exp["base_pool"] * exp["scaling_factor"] ** i for i in range(exp["scaling_points"])]
    total = pools[-1]
    timings = {}
    tick = time.monotonic()
    world, corpus = build_world(config, stream, num_docs=total)
    deadline.check("world build")
    timings["world"] = time.monotonic() - tick
    base = np.arange(pools[0])
    gold = np.asarray([int(np.argmax(world.posterior[q][: pools[0]])) for q in range(world.num_queries)])

    tick = time.monotonic()
    dr_model = train_model(config, world, corpus, doc_subset=base, paradigm="dr", mode="featurized")
    deadline.check("dense training")
    timings["train_dr"] = time.monotonic() - tick
    tick = time.monotonic()
    gr_paradigm = config["model"]["paradigm"] if config["model"]["paradigm"].startswith("gr_") else "gr_codebook"
    gr_model = train_model(config, world, corpus, doc_subset=base, paradigm=gr_paradigm)
    deadline.check("generative training")
    timings["train_gr"] = time.monotonic() - tick

    columns = ["pool_size", "dr_hits_at_1", "dr_brier", "gr_hits_at_1", "gr_brier"]
    rows = []
    for size in pools:
        tick = time.monotonic()
        pool = np.arange(size)
        dr = evaluate_model(dr_model, world, config, pool=pool, gold=gold)
        gr = evaluate_model(gr_model, world, config, pool=pool, gold=gold)
        rows.append([size, dr["hits_at_1"], dr["brier"], gr["hits_at_1"], gr["brier"]])
        deadline.check(f"scaling eval at pool={size}")
        timings[f"eval_pool={size}"] = time.monotonic() - tick
    return ExperimentResult(
        kind="corpus_scaling",
        config=config,
        tables={"corpus_scaling": Table(columns, rows)},
        summary={
            "pools": pools,
            "gr_paradigm": gr_paradigm,
            "note": "desk-scale analog of web-corpus dilution (pools grow by a fixed factor)",
        },
        timings=timings,
    )


def _capacity_scaling(config, stream, deadline):
    """Grow the dense tower's head while holding a size-matched generative twin.

    The generative twin's feature width is chosen so parameter counts agree
    within experiment.capacity_tolerance; rows are labeled as an analog
    comparison, not an architecture-identical one.
    """
    exp = config["experiment"]
    world, corpus = build_world(config, stream)
    deadline.check("world build")
    space = make_docid_space(config, corpus, "gr_codebook")
    tol = exp["capacity_tolerance"]
    r = config["model"]["embedding_dim"]
    probe = GenerativeRetriever(mode="featurized", steps=0)
    probe.fit(world, space, corpus=corpus)
    slots = sum(arr.shape[0] for name, arr in probe.params_.items() if name.endswith("_w"))

    def dr_count(hidden):
        base = (world.num_queries + world.num_docs) * r
        return base + 2 * (hidden * (2 * r + 1) + r)

    columns = [
        "requested_hidden",
        "hidden",
        "dr_params",
        "gr_feature_dim",
        "gr_params",
        "relative_mismatch",
        "matched",
        "comparison",
        "dr_hits_at_1",
        "dr_brier",
        "gr_hits_at_1",
        "gr_brier",
    ]
    rows = []
    timings = {}
    for requested in exp["hidden_grid"]:
        tick = time.monotonic()
        # The generative width is a coarse knob; round it first, then nudge
        # the dense head width (fine knob) to close the residual count.
        feature_dim = max(1, round(dr_count(requested) / slots - 1))
        gr_params = slots * (feature_dim + 1)
        hidden = max(1, requested + round((gr_params - dr_count(requested)) / (2 * (2 * r + 1))))
        dr_model = train_model(
            config,
            world,
            corpus,
            paradigm="dr",
            projection_dim=r,
            projection_hidden=hidden,
            projection_init="random",
        )
        target = dr_model.trainable_parameter_count()
        gr_corpus = _feature_shim(corpus, world, feature_dim, stream.split(91))
        gr_model = train_model(
            config, world, gr_corpus, paradigm="gr_codebook", mode="featurized", docid_space=space
        )
        gr_params = gr_model.trainable_parameter_count()
        mismatch = abs(gr_params - target) / target
        dr = evaluate_model(dr_model, world, config)
        gr = evaluate_model(gr_model, world, config)
        rows.append(
            [
                requested,
                hidden,
                target,
                feature_dim,
                gr_params,
                mismatch,
                mismatch <= tol,
                "analog",
                dr["hits_at_1"],
                dr["brier"],
                gr["hits_at_1"],
                gr["brier"],
            ]
        )
        deadline.check(f"capacity at hidden={requested}")
        timings[f"hidden={requested}"] = time.monotonic() - tick
    return ExperimentResult(
        kind="capacity_scaling",
        config=config,
        tables={"capacity_scaling": Table(columns, rows)},
        summary={"hidden_grid": exp["hidden_grid"], "capacity_tolerance": tol},
        timings=timings,
    )


def _feature_shim(corpus, world, feature_dim, stream):
    """Corpus copy whose query features have an arbitrary width."""
    from .world import Corpus, gaussian_features

    return Corpus(
        doc_features=corpus.doc_features,
        query_features=gaussian_features(world.num_queries, feature_dim, stream),
        doc_ids=corpus.doc_ids,
        doc_texts=corpus.doc_texts,
        query_ids=corpus.query_ids,
        query_texts=corpus.query_texts,
    )


def _verify_all(config, stream, deadline):
    """Desk-scale mechanical checks of every theoretical claim."""
    rows = []
    failures = []
    timings = {}
    last = [time.monotonic()]

    def record(name, observed, reference, ok):
        now = time.monotonic()
        timings[name] = now - last[0]
        last[0] = now
        rows.append([name, observed, reference, "pass" if ok else "fail"])
        if not ok:
            failures.append(name)

    logz, logzk = theory.partition_functions(np.zeros(1000), np.arange(10))
    obs = logz - logzk
    record("constant_score_gap", obs, math.log(100.0), abs(obs - math.log(100.0)) <= 1e-9)
    deadline.check("constant-score identity")

    spectrum = geometric_spectrum(8, 0.9, 1.0, 16, 128)
    world = make_spectral_world(16, 128, spectrum, stream.split(1))
    report = theory.estimate_gap(world, world.logits, 8, 1.0, 20_000, stream.split(2), delta_samples=20_000)
    record(
        "gap_floor_slack",
        report.signed_slack,
        -3.0 * report.se,
        report.signed_slack >= -3.0 * report.se,
    )
    deadline.check("gap floor")

    tail = theory.check_bernstein_tail(
        world.logits[0],
        np.full(128, 1.0 / 128),
        1.0,
        32,
        config["experiment"]["tail_epsilon"],
        20_000,
        stream.split(3),
        moment_samples=200_000,
    )
    record(
        "lower_tail_bound",
        tail.frequency,
        tail.bound + 3.0 * tail.se,
        tail.frequency <= tail.bound + 3.0 * tail.se,
    )
    deadline.check("tail bound")

    gen = stream.split(4).generator()
    worst = 0.0
    for _ in range(200):
        p = gen.dirichlet(np.ones(64))
        q = gen.dirichlet(np.ones(64))
        worst = max(worst, abs(theory.ce_kl_decomposition(p, q).residual))
    record("ce_entropy_kl_identity", worst, 1e-12, worst < 1e-12)
    deadline.check("cross-entropy identity")

    small = make_spectral_world(16, 32, geometric_spectrum(8, 0.7, 1.0, 16, 32), stream.split(5))
    ey = theory.eckart_young_check(small.logits, 4, stream.split(6))
    ok = ey.trained_loss >= ey.tail_energy - 1e-6 and ey.trained_loss <= ey.tail_energy * 1.02 + 1e-9
    record("low_rank_floor", ey.trained_loss, ey.tail_energy, ok)
    deadline.check("low-rank floor")

    gen = stream.split(7).generator()
    bilinear = DenseRetriever.from_tables(
        gen.standard_normal((64, 3, 2)), gen.standard_normal((64, 3, 2))
    )
    rank = theory.numerical_rank(bilinear.score_matrix())
    record("score_rank_cap", rank, 6, rank <= 6)
    deadline.check("rank cap")

    tiny = make_spectral_world(8, 32, geometric_spectrum(4, 0.8, 1.0, 8, 32), stream.split(8))
    vectors = stream.split(9).generator().standard_normal((32, 8))
    space, _ = codebook_docids(vectors, num_stages=3, codebook_size=4, seed=config["seed"])
    exact = GenerativeRetriever.exact(tiny, space)
    view = exact.view()
    worst_tv = 0.0
    for q in range(tiny.num_queries):
        _, probs = exact.leaf_posterior(q, view)
        worst_tv = max(worst_tv, evaluation.tv_distance(tiny.posterior[q], probs))
    record("exact_decoder_tv", worst_tv, 1e-12, worst_tv <= 1e-12)
    deadline.check("exact decoder")

    return ExperimentResult(
        kind="verify_all",
        config=config,
        tables={"verify": Table(["check", "observed", "reference", "status"], rows)},
        summary={"checks": len(rows), "failures": failures},
        failures=failures,
        timings=timings,
    )


# --------------------------------------------------------------- reporting


def _jsonable(value):
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def format_cell(value) -> str:
    """One CSV cell; floats at 9 significant digits, booleans lowercase."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.9g}"
    return str(value)


def table_to_csv(table: Table) -> str:
    lines = [",".join(str(c) for c in table.columns)]
    for row in table.rows:
        lines.append(",".join(format_cell(v) for v in _jsonable(list(row))))
    return "\n".join(lines) + "\n"


def emit_report(result: ExperimentResult, out_dir) -> list:
    """Write report.json plus one CSV per table; returns the paths written.

    Everything in report.json except wall_clock is deterministic for a fixed
    config and seed; CSVs are byte-stable.
    """
    import hashlib
    import json
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_texts = {name: table_to_csv(t) for name, t in result.tables.items()}
    payload = {
        "schema_version": 1,
        "kind": result.kind,
        "config": result.config,
        "summary": _jsonable(result.summary),
        "failures": _jsonable(result.failures),
        "tables": {
            name: {"columns": list(t.columns), "rows": _jsonable(t.rows)}
            for name, t in result.tables.items()
        },
        "artifact_hashes": {
            f"{name}.csv": hashlib.sha256(text.encode("utf-8")).hexdigest()
            for name, text in csv_texts.items()
        },
        "wall_clock": {k: round(float(v), 6) for k, v in result.timings.items()},
    }
    paths = []
    report_path = out / "report.json"
    report_path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(report_path)
    for name, text in csv_texts.items():
        csv_path = out / f"{name}.csv"
        csv_path.write_text(text, encoding="utf-8")
        paths.append(csv_path)
    return paths


def run_experiment(config: dict) -> ExperimentResult:
    deadline = Deadline(config["budget"]["max_seconds"])
    stream = RandomStream(config["seed"])
    kind = config["experiment"]["kind"]
    exp = config["experiment"]
    if kind == "single":
        result = _single(config, stream, deadline)[0]
    elif kind == "negatives_sweep":
        result = _grid_sweep(config, stream, deadline, kind, exp["k_grid"], "K", "K")
    elif kind == "ratio_sweep":
        result = _grid_sweep(config, stream, deadline, kind, exp["ratio_grid"], "hard_ratio", "hard_ratio")
    elif kind == "dim_sweep":
        result = _grid_sweep(config, stream, deadline, kind, exp["dim_grid"], "embedding_dim", "embedding_dim")
    elif kind == "corpus_scaling":
        result = _corpus_scaling(config, stream, deadline)
    elif kind == "capacity_scaling":
        result = _capacity_scaling(config, stream, deadline)
    elif kind == "verify_all":
        result = _verify_all(config, stream, deadline)
    else:
        raise ConfigError(f"experiment.kind {kind!r} is not recognized")
    result.timings["total"] = time.monotonic() - deadline.start
    return result
