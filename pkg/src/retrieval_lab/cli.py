"""Command line entry point.

    lab world   --config c.json          materialize the world and corpus
    lab train   --config c.json          train the configured retriever
    lab eval    --config c.json          evaluate (training first if needed)
    lab verify  --config c.json          run every theory check (exit 4 on fail)
    lab sweep   --config c.json          run the configured experiment grid
    lab report  --config c.json          re-render CSVs from a saved report

Every subcommand accepts repeated --set section.key=value overrides and an
--out directory (precedence: --out, then config.out_dir, then $LAB_OUT_DIR).
Exit codes: 0 success, 2 configuration problem, 3 budget exceeded, 4 a
verification check failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoints import load_model, save_model
from .config import apply_overrides, config_to_json, load_config, parse_config
from .experiments import (
    ExperimentResult,
    Table,
    build_world,
    emit_report,
    evaluate_model,
    make_docid_space,
    run_experiment,
    table_to_csv,
    train_model,
)
from .rng import RandomStream
from .validation import BudgetError, ConfigError, DomainError

_COMMANDS = ("world", "train", "eval", "verify", "sweep", "report")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lab", description="desk-scale retrieval laboratory"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        cmd = sub.add_parser(name, help=f"{name} stage")
        cmd.add_argument("--config", default=None, help="JSON config file (defaults apply without it)")
        cmd.add_argument(
            "--set",
            action="append",
            default=[],
            dest="overrides",
            metavar="KEY=VALUE",
            help="override one config field, e.g. --set model.steps=1000",
        )
        cmd.add_argument("--out", default=None, help="output directory")
    return parser


def _resolve(args) -> tuple[dict, Path]:
    config = load_config(args.config) if args.config else parse_config({})
    if args.overrides:
        config = apply_overrides(config, args.overrides)
    out_dir = args.out or config["out_dir"] or os.environ.get("LAB_OUT_DIR") or "lab_out"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return config, out


def _cmd_world(config, out) -> int:
    stream = RandomStream(config["seed"])
    world, corpus = build_world(config, stream)
    np.savez(out / "world.npz", logits=world.logits)
    np.savez(
        out / "corpus.npz",
        doc_features=corpus.doc_features,
        query_features=corpus.query_features,
    )
    meta = {
        "num_queries": world.num_queries,
        "num_docs": world.num_docs,
        "feature_dim": corpus.feature_dim,
        "doc_ids": list(corpus.doc_ids),
        "query_ids": list(corpus.query_ids),
        "config": config,
    }
    (out / "world_meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    if config["model"]["paradigm"].startswith("gr_"):
        space = make_docid_space(config, corpus)
        (out / "docids.json").write_text(space.to_json() + "\n", encoding="utf-8")
    print(f"world: {world.num_queries} queries x {world.num_docs} docs -> {out}")
    return 0


def _cmd_train(config, out) -> int:
    stream = RandomStream(config["seed"])
    world, corpus = build_world(config, stream)
    started = time.monotonic()
    model = train_model(config, world, corpus)
    elapsed = time.monotonic() - started
    save_model(model, out / "checkpoint.json", extra={"config": config})
    history = Table(["step", "mean_loss"], [list(entry) for entry in model.loss_history_])
    (out / "loss_history.csv").write_text(table_to_csv(history), encoding="utf-8")
    final = model.loss_history_[-1][1] if model.loss_history_ else float("nan")
    print(f"trained {config['model']['paradigm']}: final loss {final:.6g} ({elapsed:.1f}s) -> {out}")
    return 0


def _cmd_eval(config, out) -> int:
    stream = RandomStream(config["seed"])
    world, corpus = build_world(config, stream)
    checkpoint = out / "checkpoint.json"
    if checkpoint.exists():
        model = load_model(checkpoint)
    else:
        model = train_model(config, world, corpus)
    metrics = evaluate_model(model, world, config)
    result = ExperimentResult(
        kind="eval",
        config=config,
        tables={"metrics": Table(list(metrics.keys()), [list(metrics.values())])},
        summary={"paradigm": config["model"]["paradigm"], **metrics},
    )
    emit_report(result, out)
    for name, value in metrics.items():
        print(f"{name}: {value:.6g}")
    return 0


def _cmd_verify(config, out) -> int:
    config = {**config, "experiment": {**config["experiment"], "kind": "verify_all"}}
    result = run_experiment(config)
    emit_report(result, out)
    for check, observed, reference, status in result.tables["verify"].rows:
        print(f"{status:4s}  {check}: observed {observed:.6g} vs reference {reference:.6g}")
    if result.failures:
        print(f"{len(result.failures)} check(s) failed: {', '.join(result.failures)}", file=sys.stderr)
        return 4
    print("all checks passed")
    return 0


def _cmd_sweep(config, out) -> int:
    started = time.monotonic()
    result = run_experiment(config)
    paths = emit_report(result, out)
    elapsed = time.monotonic() - started
    print(f"{result.kind}: wrote {', '.join(p.name for p in paths)} to {out} ({elapsed:.1f}s)")
    if result.failures:
        print(f"failures: {', '.join(result.failures)}", file=sys.stderr)
        return 4
    return 0


def _cmd_report(config, out) -> int:
    report_path = out / "report.json"
    if not report_path.exists():
        raise ConfigError(f"no report.json found in {out}; run eval or sweep first")
    payload = json.loads(report_path.read_text(encoding="utf-8"))
    for name, table in payload.get("tables", {}).items():
        csv_path = out / f"{name}.csv"
        csv_path.write_text(
            table_to_csv(Table(table["columns"], table["rows"])), encoding="utf-8"
        )
        print(f"{name}: {len(table['rows'])} rows -> {csv_path}")
    print(json.dumps(payload.get("summary", {}), indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config, out = _resolve(args)
        handler = {
            "world": _cmd_world,
            "train": _cmd_train,
            "eval": _cmd_eval,
            "verify": _cmd_verify,
            "sweep": _cmd_sweep,
            "report": _cmd_report,
        }[args.command]
        return handler(config, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DomainError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return 2
    except BudgetError as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return 3


def entry():
    sys.exit(main(sys.argv[1:]))


if __name__ == "__main__":
    entry()
