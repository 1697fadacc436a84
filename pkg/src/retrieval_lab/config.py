"""Experiment configuration: a strict, JSON-native schema with defaults.

Configs are plain nested dicts so they round-trip through JSON unchanged.
Validation fills in defaults, rejects unknown keys, and reports every
problem with the full dotted path of the offending key.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from .validation import ConfigError

PARADIGMS = ("dr", "mvdr", "gr_codebook", "gr_text")
EXPERIMENT_KINDS = (
    "single",
    "negatives_sweep",
    "ratio_sweep",
    "dim_sweep",
    "corpus_scaling",
    "capacity_scaling",
    "verify_all",
)


@dataclass(frozen=True)
class Field:
    default: object
    kind: str  # int | float | str | bool | int_list | float_list
    choices: tuple | None = None
    minimum: float | None = None
    maximum: float | None = None
    exclusive_minimum: bool = False
    allow_none: bool = False


SCHEMA: dict = {
    "seed": Field(0, "int", minimum=0),
    "out_dir": Field(None, "str", allow_none=True),
    "world": {
        "kind": Field("spectral", "str", choices=("spectral", "tsv")),
        "num_queries": Field(64, "int", minimum=1),
        "num_docs": Field(256, "int", minimum=2),
        "rank": Field(16, "int", minimum=1),
        "spectrum_decay": Field(0.85, "float", minimum=0.0, maximum=1.0, exclusive_minimum=True),
        "logit_scale": Field(1.0, "float", minimum=0.0, exclusive_minimum=True),
        "feature_dim": Field(64, "int", minimum=1),
        "relevance_temperature": Field(0.1, "float", minimum=0.0, exclusive_minimum=True),
        "ngram_max": Field(3, "int", minimum=1),
        "docs_path": Field(None, "str", allow_none=True),
        "queries_path": Field(None, "str", allow_none=True),
    },
    "model": {
        "paradigm": Field("dr", "str", choices=PARADIGMS),
        "mode": Field("tabular", "str", choices=("tabular", "featurized")),
        "embedding_dim": Field(32, "int", minimum=1),
        "channels": Field(4, "int", minimum=1),
        "temperature": Field(1.0, "float", minimum=0.0, exclusive_minimum=True),
        "steps": Field(5000, "int", minimum=0),
        "learning_rate": Field(0.3, "float", minimum=0.0),
        "negative_kind": Field("uniform", "str", choices=("uniform", "hard_mixture")),
        "hard_ratio": Field(0.5, "float", minimum=0.0, maximum=1.0),
        "hard_pool_size": Field(32, "int", minimum=1),
        "refresh_every": Field(100, "int", minimum=1),
        "log_every": Field(100, "int", minimum=1),
        "init_scale": Field(0.1, "float", minimum=0.0),
        "projection_dim": Field(None, "int", minimum=1, allow_none=True),
        "projection_hidden": Field(None, "int", minimum=1, allow_none=True),
        "projection_init": Field("random", "str", choices=("random", "identity")),
        "num_stages": Field(4, "int", minimum=1),
        "codebook_size": Field(16, "int", minimum=2),
    },
    "experiment": {
        "kind": Field("single", "str", choices=EXPERIMENT_KINDS),
        "K": Field(16, "int", minimum=2),
        "k_grid": Field([2, 8, 32, 128], "int_list", minimum=2),
        "ratio_grid": Field([0.0, 0.25, 0.5, 0.75, 1.0], "float_list", minimum=0.0, maximum=1.0),
        "dim_grid": Field([32, 64, 128, 256, 512, 1024], "int_list", minimum=1),
        "hidden_grid": Field([4, 8, 16, 32, 64], "int_list", minimum=1),
        "eval_k": Field(10, "int", minimum=1),
        "base_pool": Field(1024, "int", minimum=2),
        "scaling_points": Field(5, "int", minimum=1),
        "scaling_factor": Field(2, "int", minimum=2),
        "capacity_tolerance": Field(0.05, "float", minimum=0.0),
        "gap_trials": Field(100_000, "int", minimum=100),
        "tail_trials": Field(100_000, "int", minimum=100),
        "tail_epsilon": Field(0.3, "float", minimum=0.0, exclusive_minimum=True),
    },
    "budget": {
        "max_seconds": Field(None, "float", minimum=0.0, exclusive_minimum=True, allow_none=True),
        "max_steps": Field(None, "int", minimum=1, allow_none=True),
    },
}


def _check_scalar(value, field: Field, path: str):
    if value is None:
        if field.allow_none:
            return None
        raise ConfigError(f"{path} must not be null")
    if field.kind in ("int", "int_list") and isinstance(value, bool):
        raise ConfigError(f"{path} must be an integer, got a boolean")
    if field.kind in ("int", "int_list"):
        if not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        out = value
    elif field.kind in ("float", "float_list"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        out = float(value)
    elif field.kind == "str":
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        out = value
    elif field.kind == "bool":
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        out = value
    else:  # pragma: no cover - schema authoring error
        raise ConfigError(f"{path} has unknown field kind {field.kind}")
    if field.choices is not None and out not in field.choices:
        raise ConfigError(f"{path} must be one of {list(field.choices)}, got {out!r}")
    if field.minimum is not None and not isinstance(out, str):
        if field.exclusive_minimum and out <= field.minimum:
            raise ConfigError(f"{path} must be greater than {field.minimum}, got {out}")
        if not field.exclusive_minimum and out < field.minimum:
            raise ConfigError(f"{path} must be at least {field.minimum}, got {out}")
    if field.maximum is not None and not isinstance(out, str) and out > field.maximum:
        raise ConfigError(f"{path} must be at most {field.maximum}, got {out}")
    return out


def _validate(raw, schema: dict, path: str) -> dict:
    if not isinstance(raw, dict):
        raise ConfigError(f"{path or 'config'} must be an object, got {raw!r}")
    for key in raw:
        if key not in schema:
            where = f"{path}.{key}" if path else str(key)
            raise ConfigError(f"unknown key {where}")
    out = {}
    for key, spec in schema.items():
        where = f"{path}.{key}" if path else str(key)
        if isinstance(spec, dict):
            out[key] = _validate(raw.get(key, {}), spec, where)
        elif spec.kind.endswith("_list"):
            value = raw.get(key, spec.default)
            if not isinstance(value, list) or not value:
                raise ConfigError(f"{where} must be a non-empty list, got {value!r}")
            out[key] = [_check_scalar(v, spec, f"{where}[{i}]") for i, v in enumerate(value)]
        else:
            out[key] = _check_scalar(raw.get(key, spec.default), spec, where)
    return out


def parse_config(raw: dict | None = None) -> dict:
    """Validate a raw mapping against the schema and fill in defaults."""
    return _validate(raw or {}, SCHEMA, "")


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    return parse_config(raw)


def config_to_json(config: dict) -> str:
    return json.dumps(config, indent=2, sort_keys=True)


def apply_overrides(config: dict, assignments) -> dict:
    """Apply key=value overrides (dotted paths, JSON-coerced values) and revalidate."""
    out = json.loads(json.dumps(config))
    for item in assignments:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, text = item.split("=", 1)
        keys = dotted.split(".")
        try:
            value = json.loads(text)
        except json.JSONDecodeError:
            value = text
        node = out
        for key in keys[:-1]:
            nxt = node.get(key)
            if not isinstance(nxt, dict):
                raise ConfigError(f"unknown key {dotted}")
            node = nxt
        if keys[-1] not in node:
            raise ConfigError(f"unknown key {dotted}")
        node[keys[-1]] = value
    return parse_config(out)
