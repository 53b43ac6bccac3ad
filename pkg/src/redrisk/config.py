"""Flat key-value run configuration and the run manifest.

The file format is one `section.key = value` assignment per line, `#`
comments, and nothing else: no nesting, no quoting, no continuation lines.
Every key is declared in the registry below with its parser and bound check;
unknown keys and duplicate keys are rejected by name and line.  An empty file
yields the full default configuration.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timezone

from .cohort import DEFAULT_PREVALENCES, SyntheticConfig
from .errors import ConfigError
from .eval import ExperimentConfig


# ---------------------------------------------------------------------------
# value parsers; each raises ConfigError naming the key and the expected form


def _parse_int(key, raw):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{key} expects an integer, got {raw!r}")


def _parse_float(key, raw):
    try:
        return float(raw)
    except ValueError:
        raise ConfigError(f"{key} expects a number, got {raw!r}")


def _parse_bool(key, raw):
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"{key} expects true/false, got {raw!r}")


def _parse_str_list(key, raw):
    items = tuple(part.strip() for part in raw.split(",") if part.strip())
    if not items:
        raise ConfigError(f"{key} expects a comma-separated list, got {raw!r}")
    return items


def _parse_int_list(key, raw):
    return tuple(_parse_int(key, part) for part in _parse_str_list(key, raw))


def _parse_float_list(key, raw):
    return tuple(_parse_float(key, part) for part in _parse_str_list(key, raw))


def _bound_open(lo, hi):
    def check(key, v):
        if not (lo < v < hi):
            raise ConfigError(f"{key} must lie in ({lo}, {hi}), got {v}")
        return v

    return check


def _bound_min(lo):
    def check(key, v):
        if v < lo:
            raise ConfigError(f"{key} must be >= {lo}, got {v}")
        return v

    return check


def _positive(key, v):
    if v <= 0:
        raise ConfigError(f"{key} must be positive, got {v}")
    return v


def _no_check(key, v):
    return v


# key -> (parser, check, default, help). Defaults mirror the training-recipe
# values so a run with an empty config reproduces the standard protocol.
CONFIG_KEYS = {
    "run.feature_sets": (_parse_str_list, _no_check, ("fs1", "fs2", "fs3"),
                         "feature sets to evaluate"),
    "run.models": (_parse_str_list, _no_check, ("cart", "lasso", "rf", "gbm", "dnnd"),
                   "models to evaluate"),
    "run.horizons": (_parse_int_list, _no_check, (15, 30, 60, 90, 180, 360),
                     "outcome horizons in days"),
    "run.seeds": (_parse_int_list, _no_check, (1,), "protocol seeds, one pass per seed"),
    "run.train_fraction": (_parse_float, _bound_open(0.0, 1.0), 0.75,
                           "fraction of patients in the training split"),
    "run.clinician": (_parse_bool, _no_check, False,
                      "also score the anchor overall rating as a baseline"),
    "featurize.filter_threshold": (_parse_float, _bound_open(0.0, 1.0), 0.01,
                                   "min fraction of train rows a feature must be nonzero in"),
    "forest.n_trees": (_parse_int, _bound_min(1), 25, "trees per random forest"),
    "gbm.rounds": (_parse_int, _bound_min(1), 200, "boosting rounds"),
    "gbm.rho": (_parse_float, _bound_open(0.0, 1.0), 0.5,
                "row subsample fraction per round"),
    "gbm.lr_start": (_parse_float, _positive, 0.001, "line-search start step"),
    "gbm.lr_cap": (_parse_float, _positive, 0.1, "line-search cap"),
    "dnnd.hidden": (_parse_int_list, _no_check, (50, 50), "hidden layer widths"),
    "dnnd.minibatch": (_parse_int, _bound_min(1), 64, "minibatch size"),
    "dnnd.lr_start": (_parse_float, _positive, 0.1, "initial learning rate"),
    "dnnd.lr_stop": (_parse_float, _positive, 1e-4, "stop when the rate falls below this"),
    "dnnd.momentum": (_parse_float, _bound_open(-1.0, 1.0), 0.9, "momentum coefficient"),
    "dnnd.weight_decay": (_parse_float, _bound_min(0.0), 1e-4, "L2 decay on weights"),
    "dnnd.max_norm": (_parse_float, _positive, 1.0, "cap on hidden-unit incoming norms"),
    "dnnd.keep": (_parse_float, _bound_open(0.0, 1.0), 0.5, "dropout keep probability"),
    "dnnd.patience": (_parse_int, _bound_min(1), 2, "plateau epochs before halving the rate"),
    "dnnd.max_epochs": (_parse_int, _bound_min(1), 200, "epoch cap"),
    "lasso.grid_points": (_parse_int, _bound_min(1), 20, "penalty grid size"),
    "lasso.tune_fraction": (_parse_float, _bound_open(0.0, 1.0), 0.75,
                            "inner split fraction for penalty tuning"),
    "gen.n_patients": (_parse_int, _bound_min(2), 7399, "synthetic cohort size"),
    "gen.seed": (_parse_int, _bound_min(0), 1, "synthetic generator seed"),
    "gen.signal_strength": (_parse_float, _no_check, 0.8,
                            "planted signal mix weight in [0, 1]"),
    "gen.redundancy_factor": (_parse_int, _bound_min(0), 0,
                              "correlated duplicate channels per informative channel"),
    "gen.prevalences": (_parse_float_list, _no_check,
                        tuple(DEFAULT_PREVALENCES[h] for h in sorted(DEFAULT_PREVALENCES)),
                        "target label prevalence per horizon, aligned with run.horizons"),
}


def parse_flat_config(text: str) -> dict:
    """Raw `key = value` pairs; duplicate or unknown keys are errors."""
    values = {}
    first_line = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.split("#", 1)[0].strip()
        if not key:
            raise ConfigError(f"line {lineno}: missing key before '='")
        if key in values:
            raise ConfigError(
                f"line {lineno}: duplicate key {key!r} (first set on line {first_line[key]})"
            )
        if key not in CONFIG_KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = raw
        first_line[key] = lineno
    return values


def resolve_config(raw_values: dict) -> dict:
    """Typed, bound-checked values for every registry key, defaults filled in."""
    resolved = {}
    for key, (parse, check, default, _doc) in CONFIG_KEYS.items():
        if key in raw_values:
            resolved[key] = check(key, parse(key, raw_values[key]))
        else:
            resolved[key] = default
    return resolved


@dataclass
class RunSettings:
    experiment: ExperimentConfig
    synthetic: SyntheticConfig
    gen_seed: int
    config_sha256: str

    def describe(self) -> str:
        e = self.experiment
        return (
            f"{len(e.models)} models x {len(e.feature_sets)} feature sets x "
            f"{len(e.horizons)} horizons, seeds {e.seeds}"
        )


def build_settings(text: str) -> RunSettings:
    resolved = resolve_config(parse_flat_config(text))
    horizons = resolved["run.horizons"]
    prevalences = resolved["gen.prevalences"]
    if len(prevalences) != len(horizons):
        raise ConfigError(
            f"gen.prevalences has {len(prevalences)} entries for {len(horizons)} horizons"
        )
    experiment = ExperimentConfig(
        feature_sets=resolved["run.feature_sets"],
        models=resolved["run.models"],
        horizons=horizons,
        seeds=resolved["run.seeds"],
        train_fraction=resolved["run.train_fraction"],
        filter_threshold=resolved["featurize.filter_threshold"],
        clinician=resolved["run.clinician"],
        forest_trees=resolved["forest.n_trees"],
        gbm_rounds=resolved["gbm.rounds"],
        gbm_subsample=resolved["gbm.rho"],
        gbm_lr_start=resolved["gbm.lr_start"],
        gbm_lr_cap=resolved["gbm.lr_cap"],
        dnnd_hidden=resolved["dnnd.hidden"],
        dnnd_minibatch=resolved["dnnd.minibatch"],
        dnnd_lr_start=resolved["dnnd.lr_start"],
        dnnd_lr_stop=resolved["dnnd.lr_stop"],
        dnnd_momentum=resolved["dnnd.momentum"],
        dnnd_weight_decay=resolved["dnnd.weight_decay"],
        dnnd_max_norm=resolved["dnnd.max_norm"],
        dnnd_keep=resolved["dnnd.keep"],
        dnnd_patience=resolved["dnnd.patience"],
        dnnd_max_epochs=resolved["dnnd.max_epochs"],
        lasso_grid_points=resolved["lasso.grid_points"],
        lasso_tune_fraction=resolved["lasso.tune_fraction"],
    )
    experiment.validate()
    synthetic = SyntheticConfig(
        n_patients=resolved["gen.n_patients"],
        prevalence_by_horizon={int(h): float(p) for h, p in zip(horizons, prevalences)},
        signal_strength=resolved["gen.signal_strength"],
        redundancy_factor=resolved["gen.redundancy_factor"],
    )
    synthetic.validate()
    return RunSettings(
        experiment=experiment,
        synthetic=synthetic,
        gen_seed=resolved["gen.seed"],
        config_sha256=hashlib.sha256(text.encode("utf-8")).hexdigest(),
    )


def load_settings(path) -> RunSettings:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return build_settings(text)


def config_reference() -> str:
    """One line per key: name, default, help."""
    lines = []
    for key, (_parse, _check, default, doc) in CONFIG_KEYS.items():
        if isinstance(default, tuple):
            shown = ",".join(str(v) for v in default)
        else:
            shown = str(default)
        lines.append(f"{key} = {shown}\n    {doc}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run manifest

MANIFEST_NAME = "manifest.json"


@dataclass
class RunManifest:
    config_sha256: str
    seeds: tuple
    package_version: str
    started_at: str
    status: str = "running"
    finished_at: str | None = None
    outputs: tuple = ()

    @classmethod
    def start(cls, config_sha256: str, seeds, package_version: str) -> "RunManifest":
        return cls(
            config_sha256=config_sha256,
            seeds=tuple(int(s) for s in seeds),
            package_version=package_version,
            started_at=_utc_now(),
        )

    def finish(self, outputs) -> "RunManifest":
        self.status = "complete"
        self.finished_at = _utc_now()
        self.outputs = tuple(str(p) for p in outputs)
        return self

    def fail(self) -> "RunManifest":
        self.status = "failed"
        self.finished_at = _utc_now()
        return self

    def to_json(self) -> str:
        payload = {
            "config_sha256": self.config_sha256,
            "seeds": list(self.seeds),
            "package_version": self.package_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "status": self.status,
            "outputs": list(self.outputs),
        }
        return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(manifest: RunManifest, directory) -> str:
    """Atomic write: temp file in the same directory, then rename over."""
    path = os.path.join(str(directory), MANIFEST_NAME)
    fd, tmp = tempfile.mkstemp(dir=str(directory), prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(manifest.to_json())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_manifest(directory) -> RunManifest:
    path = os.path.join(str(directory), MANIFEST_NAME)
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return RunManifest(
        config_sha256=payload["config_sha256"],
        seeds=tuple(payload["seeds"]),
        package_version=payload["package_version"],
        started_at=payload["started_at"],
        status=payload["status"],
        finished_at=payload.get("finished_at"),
        outputs=tuple(payload.get("outputs", ())),
    )
