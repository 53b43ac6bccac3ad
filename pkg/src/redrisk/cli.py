"""Command-line entry point.

Four subcommands: `gen` writes a synthetic cohort, `validate` checks a cohort
file, `run` executes the experiment protocol into an output directory, and
`score` applies archived models to a cohort.  Logs go to stderr (level from
--log-level, overridable by the REDRISK_LOG_LEVEL environment variable); data
only ever goes to files.  Exit codes: 0 success, 2 configuration error,
3 data or protocol error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import __version__
from .archive import load_model_archive, restore_model, save_model_archive
from .cohort import (
    SyntheticConfig,
    generate_synthetic_cohort,
    load_cohort,
    save_cohort,
    validate_cohort,
)
from .config import RunManifest, load_settings, write_manifest
from .ensemble import predict_forest, predict_gbm
from .errors import ConfigError, DataError, ExperimentError, RedriskError
from .eval import run_experiment
from .featurize import build_feature_matrix
from .neuralnet import forward_dropout
from .util import sigmoid

log = logging.getLogger("redrisk")

_FORMATS = ("cohort-archive", "event-lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="redrisk",
        description="Risk-of-event prediction over event timelines: "
        "cohort tooling, model training, and scoring.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="stderr log level (env REDRISK_LOG_LEVEL overrides)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("gen", help="generate a synthetic cohort file")
    p_gen.add_argument("--out", required=True, help="output cohort path")
    p_gen.add_argument("--config", help="config file supplying gen.* defaults")
    p_gen.add_argument("--n", type=int, help="number of patients")
    p_gen.add_argument("--seed", type=int, help="generator seed")
    p_gen.add_argument("--signal", type=float, help="signal strength in [0, 1]")
    p_gen.add_argument("--redundancy", type=int, help="duplicate channels per informative channel")
    p_gen.add_argument("--format", default="cohort-archive", choices=_FORMATS,
                       help="output file format")
    p_gen.set_defaults(func=_cmd_gen)

    p_val = sub.add_parser("validate", help="check a cohort file and report problems")
    p_val.add_argument("--data", required=True, help="cohort path")
    p_val.add_argument("--format", default="cohort-archive", choices=_FORMATS,
                       help="input file format")
    p_val.set_defaults(func=_cmd_validate)

    p_run = sub.add_parser("run", help="run the full evaluation protocol")
    p_run.add_argument("--config", required=True, help="run configuration file")
    p_run.add_argument("--out-dir", required=True, help="directory for metrics, ROC, and models")
    p_run.add_argument("--data", help="cohort file (default: generate synthetically)")
    p_run.add_argument("--data-format", default="cohort-archive", choices=_FORMATS,
                       help="cohort file format")
    p_run.add_argument("--seed", type=int, help="override run.seeds with a single seed")
    p_run.add_argument("--models", help="comma-separated override of run.models")
    p_run.add_argument("--feature-sets", help="comma-separated override of run.feature_sets")
    p_run.set_defaults(func=_cmd_run)

    p_score = sub.add_parser("score", help="apply archived models to a cohort")
    p_score.add_argument("--model", required=True, help="model archive path")
    p_score.add_argument("--data", required=True, help="cohort path")
    p_score.add_argument("--out", required=True, help="output scores CSV")
    p_score.add_argument("--format", default="cohort-archive", choices=_FORMATS,
                         help="cohort file format")
    p_score.set_defaults(func=_cmd_score)
    return parser


def _setup_logging(level_name: str):
    level = os.environ.get("REDRISK_LOG_LEVEL", level_name).upper()
    logging.basicConfig(
        stream=sys.stderr,
        level=getattr(logging, level, logging.INFO),
        format="%(levelname)s %(name)s: %(message)s",
    )


def _cmd_gen(args) -> int:
    if args.config:
        cfg = load_settings(args.config).synthetic
    else:
        cfg = SyntheticConfig()
    if args.n is not None:
        cfg.n_patients = args.n
    if args.signal is not None:
        cfg.signal_strength = args.signal
    if args.redundancy is not None:
        cfg.redundancy_factor = args.redundancy
    cfg.validate()
    seed = args.seed if args.seed is not None else 1
    dataset = generate_synthetic_cohort(cfg, seed=seed)
    save_cohort(dataset, args.out, format=args.format)
    log.info(
        "wrote %d patients (%d assessments) to %s",
        len(dataset.patients), dataset.n_assessments(), args.out,
    )
    return 0


def _cmd_validate(args) -> int:
    dataset = load_cohort(args.data, format=args.format)
    problems = validate_cohort(dataset)
    for msg in problems:
        log.warning("%s", msg)
    log.info(
        "%s: %d patients, %d assessments, %d warnings",
        args.data, len(dataset.patients), dataset.n_assessments(), len(problems),
    )
    return 0


def _cmd_run(args) -> int:
    settings = load_settings(args.config)
    experiment = settings.experiment
    if args.seed is not None:
        experiment.seeds = (args.seed,)
    if args.models:
        experiment.models = tuple(m.strip() for m in args.models.split(",") if m.strip())
    if args.feature_sets:
        experiment.feature_sets = tuple(
            f.strip() for f in args.feature_sets.split(",") if f.strip()
        )
    experiment.validate()

    os.makedirs(args.out_dir, exist_ok=True)
    manifest = RunManifest.start(settings.config_sha256, experiment.seeds, __version__)
    write_manifest(manifest, args.out_dir)
    try:
        if args.data:
            dataset = load_cohort(args.data, format=args.data_format)
            log.info("loaded %d patients from %s", len(dataset.patients), args.data)
        else:
            dataset = generate_synthetic_cohort(settings.synthetic, seed=settings.gen_seed)
            log.info(
                "generated %d synthetic patients (seed %d)",
                len(dataset.patients), settings.gen_seed,
            )
        report = run_experiment(dataset, experiment)

        metrics_path = os.path.join(args.out_dir, "metrics.csv")
        with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
            fh.write(report.to_csv())
        roc_dir = os.path.join(args.out_dir, "roc")
        os.makedirs(roc_dir, exist_ok=True)
        roc_paths = []
        for cell in sorted(report.roc_curves):
            path = os.path.join(roc_dir, "roc_" + cell.replace("/", "_") + ".csv")
            _write_roc_csv(report.roc_curves[cell], path)
            roc_paths.append(path)
        models_path = os.path.join(args.out_dir, "models.json.gz")
        save_model_archive(report.archive, models_path)
    except BaseException:
        write_manifest(manifest.fail(), args.out_dir)
        raise
    write_manifest(manifest.finish([metrics_path, models_path] + roc_paths), args.out_dir)
    log.info("wrote %d metric rows to %s", len(report.rows), metrics_path)
    return 0


def _write_roc_csv(points, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("threshold,fpr,tpr\n")
        for thr, fpr, tpr in points:
            fh.write(f"{float(thr)!r},{float(fpr)!r},{float(tpr)!r}\n")


def _cmd_score(args) -> int:
    archive = load_model_archive(args.model)
    dataset = load_cohort(args.data, format=args.format)
    matrices = {}

    def matrix_for(fs):
        if fs not in matrices:
            matrices[fs] = build_feature_matrix(dataset, fs)
        return matrices[fs]

    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        fh.write("cell,patient_id,assessment_index,horizon_days,score\n")
        for key in archive.keys():
            model_name, fs, horizon, _seed = key.split("/")
            entry = archive.get(key)
            matrix = matrix_for(fs)
            X = _align_columns(matrix, entry["columns"], key)
            model = restore_model(entry)
            if entry["kind"] == "dnnd.v1":
                std = entry["standardize"]
                Xs = (X - np.asarray(std["mean"])) / np.asarray(std["scale"])
                scores, _ = forward_dropout(model, Xs, mode="test")
                for col, h in enumerate(entry["horizons"]):
                    _write_scores(fh, key, matrix.anchors, h, sigmoid(scores[:, col]))
            else:
                scores = _score_single(entry["kind"], model, X)
                _write_scores(fh, key, matrix.anchors, horizon, scores)
    log.info("scored %d archive entries onto %s", len(archive), args.out)
    return 0


def _score_single(kind, model, X):
    if kind == "tree.v1":
        return np.atleast_1d(model.predict(X))
    if kind == "forest.v1":
        return predict_forest(model, X)
    if kind == "gbm.v1":
        return sigmoid(predict_gbm(model, X))
    if kind == "lasso.v1":
        return sigmoid(model.decision(X))
    raise DataError(f"cannot score archive entries of kind {kind!r}")


def _align_columns(matrix, wanted, key):
    """Column-name alignment; features absent from this cohort score as 0."""
    index = {name: i for i, name in enumerate(matrix.columns)}
    X = np.zeros((matrix.n_rows, len(wanted)))
    missing = 0
    for j, name in enumerate(wanted):
        i = index.get(name)
        if i is None:
            missing += 1
        else:
            X[:, j] = matrix.values[:, i]
    if missing:
        log.warning("%s: %d of %d model features absent from cohort, scored as 0",
                    key, missing, len(wanted))
    return X


def _write_scores(fh, key, anchors, horizon, scores):
    for (pid, idx), s in zip(anchors, scores):
        fh.write(f"{key},{pid},{idx},{horizon},{float(s)!r}\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.log_level)
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except (DataError, ExperimentError) as exc:
        log.error("%s", exc)
        return 3
    except RedriskError as exc:
        log.error("%s", exc)
        return 3


if __name__ == "__main__":
    sys.exit(main())
