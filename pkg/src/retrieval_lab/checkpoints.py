"""JSON checkpoints for retrievers.

Everything needed to rebuild a fitted model goes into one JSON document:
constructor arguments, parameter arrays (as nested lists), and for the
generative side the docid space. Deliberately plain so checkpoints diff
cleanly and stay platform-independent.
"""

from __future__ import annotations

import json

import numpy as np

from .dense import DenseRetriever
from .docid import DocidSpace
from .generative import GenerativeRetriever
from .validation import DomainError


def _arrays_to_lists(params: dict) -> dict:
    return {name: arr.tolist() for name, arr in params.items()}


def _lists_to_arrays(payload: dict) -> dict:
    return {name: np.asarray(values, dtype=np.float64) for name, values in payload.items()}


def save_model(model, path, extra: dict | None = None):
    if isinstance(model, DenseRetriever):
        payload = {
            "family": "dense",
            "init": model.get_params(),
            "state": {
                "num_queries": model.num_queries_,
                "num_docs": model.num_docs_,
                "loss_history": model.loss_history_,
            },
            "params": _arrays_to_lists(model.params_),
        }
        if model.mode == "featurized":
            payload["state"]["query_features"] = model.query_features_.tolist()
            payload["state"]["doc_features"] = model.doc_features_.tolist()
    elif isinstance(model, GenerativeRetriever):
        payload = {
            "family": "generative",
            "init": model.get_params(),
            "state": {
                "num_queries": model.num_queries_,
                "loss_history": model.loss_history_,
                "docid_space": json.loads(model.space_.to_json()),
            },
            "params": _arrays_to_lists(model.params_),
        }
        if model.mode == "featurized":
            payload["state"]["query_features"] = model.query_features_.tolist()
    else:
        raise DomainError(f"cannot checkpoint {type(model).__name__}")
    if extra:
        payload["extra"] = extra
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    family = payload.get("family")
    if family == "dense":
        model = DenseRetriever(**payload["init"])
        model.num_queries_ = int(payload["state"]["num_queries"])
        model.num_docs_ = int(payload["state"]["num_docs"])
        model.loss_history_ = [tuple(entry) for entry in payload["state"]["loss_history"]]
        model.params_ = _lists_to_arrays(payload["params"])
        if model.mode == "featurized":
            model.query_features_ = np.asarray(payload["state"]["query_features"], dtype=np.float64)
            model.doc_features_ = np.asarray(payload["state"]["doc_features"], dtype=np.float64)
        return model
    if family == "generative":
        from .docid import build_trie

        model = GenerativeRetriever(**payload["init"])
        space = DocidSpace.from_json(json.dumps(payload["state"]["docid_space"]))
        model._attach(space, build_trie(space), int(payload["state"]["num_queries"]))
        model.loss_history_ = [tuple(entry) for entry in payload["state"]["loss_history"]]
        model.params_ = _lists_to_arrays(payload["params"])
        if model.mode == "featurized":
            model.query_features_ = np.asarray(payload["state"]["query_features"], dtype=np.float64)
        return model
    raise DomainError(f"unrecognized checkpoint family {family!r} in {path}")
