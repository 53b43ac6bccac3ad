"""Gzip-compressed JSON container for fitted models.

One archive holds every model a run produced, keyed by cell id
("{model}/{feature_set}/{horizon}/{seed}"; the multitask net uses "all" for
the horizon slot since one fit covers every horizon).  Each entry carries the
retained feature names so scoring can align columns by name instead of
position.  The gzip mtime is pinned to zero so identical runs produce
identical bytes.
"""

from __future__ import annotations

import gzip
import json

import numpy as np

from .errors import ParseError, ValidationError

ARCHIVE_MAGIC = "redrisk-models"
ARCHIVE_VERSION = 1

_KINDS = ("tree.v1", "forest.v1", "gbm.v1", "dnnd.v1", "lasso.v1")


def model_key(model: str, feature_set: str, horizon, seed: int) -> str:
    return f"{model}/{feature_set}/{horizon}/{seed}"


class ModelArchive:
    def __init__(self):
        self._entries = {}

    def add(self, key: str, kind: str, state: dict, columns, extra: dict = None):
        if kind not in _KINDS:
            raise ValidationError(f"unknown model kind {kind!r}")
        if key in self._entries:
            raise ValidationError(f"duplicate archive key {key!r}")
        entry = {"kind": kind, "columns": list(columns), "state": state}
        if extra:
            entry.update(extra)
        self._entries[key] = entry

    def get(self, key: str) -> dict:
        if key not in self._entries:
            raise KeyError(f"no archive entry {key!r}")
        return self._entries[key]

    def keys(self):
        return sorted(self._entries)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key):
        return key in self._entries


def save_model_archive(archive: ModelArchive, path):
    payload = {
        "magic": ARCHIVE_MAGIC,
        "version": ARCHIVE_VERSION,
        "entries": archive._entries,
    }
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=_json_default)
    with open(path, "wb") as fh:
        # filename="" keeps the output path out of the gzip header
        with gzip.GzipFile(fileobj=fh, filename="", mode="wb", mtime=0) as gz:
            gz.write(text.encode("utf-8"))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"not serializable: {type(obj)!r}")


def load_model_archive(path) -> ModelArchive:
    try:
        with gzip.open(path, "rt", encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ParseError(f"unreadable model archive {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("magic") != ARCHIVE_MAGIC:
        raise ParseError(f"{path} is not a model archive")
    if payload.get("version") != ARCHIVE_VERSION:
        raise ValidationError(
            f"archive version {payload.get('version')} unsupported (expected {ARCHIVE_VERSION})"
        )
    archive = ModelArchive()
    for key, entry in payload["entries"].items():
        if "kind" not in entry or "state" not in entry or "columns" not in entry:
            raise ValidationError(f"archive entry {key!r} is missing fields")
        if entry["kind"] not in _KINDS:
            raise ValidationError(f"archive entry {key!r} has unknown kind {entry['kind']!r}")
        archive._entries[key] = entry
    return archive


def restore_model(entry: dict):
    """Rebuild the fitted model object an entry describes."""
    from .ensemble import GbmModel, RandomForest
    from .linear import LassoModel
    from .neuralnet import DnndNet
    from .trees import Tree

    kind = entry["kind"]
    state = entry["state"]
    if kind == "tree.v1":
        return Tree.from_state(state)
    if kind == "forest.v1":
        return RandomForest.from_state(state)
    if kind == "gbm.v1":
        return GbmModel.from_state(state)
    if kind == "dnnd.v1":
        return DnndNet.from_state(state)
    if kind == "lasso.v1":
        return LassoModel.from_state(state)
    raise ValidationError(f"unknown model kind {kind!r}")
