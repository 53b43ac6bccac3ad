"""Metrics and the (model x feature set x horizon) experiment protocol.

The protocol fits every selected model on a patient-level training split and
scores the held-out patients, emitting one metric row per cell plus ROC
points and a model archive.  Everything downstream of the seeds is
deterministic, so reruns with the same config produce identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .archive import ModelArchive, model_key
from .cohort import DEFAULT_HORIZONS, RATING_MAX, CohortDataset, split_patients
from .ensemble import (
    ForestParams,
    GbmParams,
    fit_gbm,
    fit_random_forest,
    forest_labels,
    gbm_labels,
    predict_forest,
    predict_gbm,
)
from .errors import ConfigError, DataError, ExperimentError
from .featurize import (
    FEATURE_SETS,
    build_feature_matrix,
    default_risky_prefixes,
    filter_rare_features,
    label_outcomes,
)
from .linear import default_alpha_grid, fit_lasso_logistic, tune_penalty
from .neuralnet import NetArchitecture, TrainSchedule, predict_dnnd, train_dnnd
from .trees import TreeParams, fit_tree
from .util import derive_seed, sigmoid

# ---------------------------------------------------------------------------
# point metrics


def confusion_metrics(labels, predicted):
    """(recall, precision, F) at fixed predicted labels.

    Precision is 0 when nothing is predicted positive, and F is 0 when
    R + P = 0; recall is undefined without true positives, so that's an error.
    """
    y = np.asarray(labels)
    p = np.asarray(predicted)
    if y.shape != p.shape:
        raise DataError(f"labels {y.shape} and predictions {p.shape} do not align")
    truth = y > 0
    if not truth.any():
        raise DataError("no positives in ground truth; recall is undefined")
    pred = p > 0
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    recall = tp / (tp + fn)
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    f = 2.0 * recall * precision / (recall + precision) if recall + precision > 0 else 0.0
    return recall, precision, f


def _midranks(values):
    """1-based ranks with ties sharing the block mean."""
    order = np.argsort(values, kind="stable")
    sv = values[order]
    starts = np.flatnonzero(np.r_[True, sv[1:] != sv[:-1]])
    ends = np.r_[starts[1:], sv.size]
    block_mid = 0.5 * (starts + ends - 1) + 1.0
    ranks = np.empty(values.size)
    ranks[order] = np.repeat(block_mid, ends - starts)
    return ranks


def auc_mann_whitney(labels, scores):
    """(AUC, ci_lo, ci_hi): probability a random positive outscores a random
    negative, ties counted half, with the Hanley-McNeil 95% interval."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    if y.shape != s.shape:
        raise DataError(f"labels {y.shape} and scores {s.shape} do not align")
    pos = y > 0
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC needs at least one positive and one negative")
    ranks = _midranks(s)
    auc = (ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
    q1 = auc / (2.0 - auc)
    q2 = 2.0 * auc * auc / (1.0 + auc)
    var = (
        auc * (1.0 - auc)
        + (n_pos - 1) * (q1 - auc * auc)
        + (n_neg - 1) * (q2 - auc * auc)
    ) / (n_pos * n_neg)
    se = float(np.sqrt(max(var, 0.0)))
    lo = max(0.0, auc - 1.96 * se)
    hi = min(1.0, auc + 1.96 * se)
    return float(auc), lo, hi


def roc_points(labels, scores) -> np.ndarray:
    """(threshold, fpr, tpr) rows walking the descending distinct scores;
    starts at (inf, 0, 0) and ends at (min score, 1, 1).  Trapezoidal area
    under (fpr, tpr) equals the tie-corrected Mann-Whitney statistic."""
    y = np.asarray(labels)
    s = np.asarray(scores, dtype=float)
    pos = y > 0
    n_pos = int(pos.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise DataError("ROC needs at least one positive and one negative")
    order = np.argsort(-s, kind="stable")
    sd = s[order]
    yd = pos[order]
    last_of_block = np.r_[sd[1:] != sd[:-1], True]
    tp = np.cumsum(yd)[last_of_block]
    fp = np.cumsum(~yd)[last_of_block]
    thr = np.r_[np.inf, sd[last_of_block]]
    fpr = np.r_[0.0, fp / n_neg]
    tpr = np.r_[0.0, tp / n_pos]
    return np.column_stack([thr, fpr, tpr])


# ---------------------------------------------------------------------------
# experiment protocol

MODEL_NAMES = ("cart", "lasso", "rf", "gbm", "dnnd")
CLINICIAN_MODEL = "clinician"


@dataclass
class ExperimentConfig:
    feature_sets: tuple = FEATURE_SETS
    models: tuple = MODEL_NAMES
    horizons: tuple = DEFAULT_HORIZONS
    seeds: tuple = (1,)
    train_fraction: float = 0.75
    filter_threshold: float = 0.01
    clinician: bool = False
    forest_trees: int = 25
    gbm_rounds: int = 200
    gbm_subsample: float = 0.5
    gbm_lr_start: float = 0.001
    gbm_lr_cap: float = 0.1
    dnnd_hidden: tuple = (50, 50)
    dnnd_minibatch: int = 64
    dnnd_lr_start: float = 0.1
    dnnd_lr_stop: float = 1e-4
    dnnd_momentum: float = 0.9
    dnnd_weight_decay: float = 1e-4
    dnnd_max_norm: float = 1.0
    dnnd_keep: float = 0.5
    dnnd_patience: int = 2
    dnnd_max_epochs: int = 200
    lasso_grid_points: int = 20
    lasso_tune_fraction: float = 0.75

    def validate(self):
        if not self.feature_sets or not self.models or not self.horizons or not self.seeds:
            raise ConfigError("feature_sets, models, horizons, and seeds must be non-empty")
        for fs in self.feature_sets:
            if fs not in FEATURE_SETS:
                raise ConfigError(f"unknown feature set {fs!r}; expected one of {FEATURE_SETS}")
        for m in self.models:
            if m not in MODEL_NAMES:
                raise ConfigError(f"unknown model {m!r}; expected one of {MODEL_NAMES}")
        if len(set(self.horizons)) != len(self.horizons):
            raise ConfigError(f"duplicate horizons in {self.horizons}")
        for h in self.horizons:
            if int(h) <= 0:
                raise ConfigError(f"horizons must be positive, got {h}")
        if not (0.0 < self.train_fraction < 1.0):
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if not (0.0 < self.lasso_tune_fraction < 1.0):
            raise ConfigError(
                f"lasso_tune_fraction must lie in (0, 1), got {self.lasso_tune_fraction}"
            )
        if not (0.0 < self.filter_threshold <= 1.0):
            raise ConfigError(f"filter_threshold must lie in (0, 1], got {self.filter_threshold}")
        if not (0.0 < self.gbm_subsample < 1.0):
            raise ConfigError(f"gbm.rho must lie in (0, 1), got {self.gbm_subsample}")
        if not (0.0 < self.dnnd_keep <= 1.0):
            raise ConfigError(f"dnnd.keep must lie in (0, 1], got {self.dnnd_keep}")
        for name in (
            "forest_trees",
            "gbm_rounds",
            "dnnd_minibatch",
            "dnnd_patience",
            "dnnd_max_epochs",
            "lasso_grid_points",
        ):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("gbm_lr_start", "gbm_lr_cap", "dnnd_lr_start", "dnnd_lr_stop"):
            if float(getattr(self, name)) <= 0.0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not self.dnnd_hidden or any(int(w) < 1 for w in self.dnnd_hidden):
            raise ConfigError(f"hidden layer widths must be >= 1, got {self.dnnd_hidden}")


@dataclass
class MetricRow:
    model: str
    feature_set: str
    horizon_days: int
    n: int
    positives: int
    recall: float
    precision: float
    f_measure: float
    auc: float
    auc_ci_lo: float
    auc_ci_hi: float
    seed: int


CSV_HEADER = (
    "model,feature_set,horizon_days,n,positives,recall,precision,"
    "f_measure,auc,auc_ci_lo,auc_ci_hi,seed"
)


def metrics_csv_text(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            ",".join(
                [
                    r.model,
                    r.feature_set,
                    str(r.horizon_days),
                    str(r.n),
                    str(r.positives),
                    repr(r.recall),
                    repr(r.precision),
                    repr(r.f_measure),
                    repr(r.auc),
                    repr(r.auc_ci_lo),
                    repr(r.auc_ci_hi),
                    str(r.seed),
                ]
            )
        )
    return "\n".join(lines) + "\n"


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    roc_curves: dict = field(default_factory=dict)  # cell id -> roc_points array
    archive: ModelArchive = field(default_factory=ModelArchive)

    def to_csv(self) -> str:
        return metrics_csv_text(self.rows)


def _anchor_ratings(dataset: CohortDataset, anchors) -> np.ndarray:
    by_id = {p.patient_id: p for p in dataset.patients}
    return np.array(
        [by_id[pid].timeline.assessments[idx].overall_rating for pid, idx in anchors],
        dtype=float,
    )


def _standardize_for_net(X_train, X_test):
    mean = X_train.mean(axis=0)
    scale = X_train.std(axis=0)
    scale = np.where(scale > 0.0, scale, 1.0)
    return (X_train - mean) / scale, (X_test - mean) / scale, mean, scale


def _fit_horizon_model(model, X_tr, y_tr, X_te, config, cell_seed):
    """Returns (scores_for_auc, predicted_labels, archive_kind, state)."""
    if model == "cart":
        tree = fit_tree(X_tr, y_tr, TreeParams(task="classification", seed=cell_seed))
        prob = tree.predict(X_te)
        return prob, np.where(prob >= 0.5, 1, -1), "tree.v1", tree.to_state()
    if model == "rf":
        forest = fit_random_forest(
            X_tr, y_tr, ForestParams(n_trees=config.forest_trees, seed=cell_seed)
        )
        prob = predict_forest(forest, X_te)
        return prob, forest_labels(prob), "forest.v1", forest.to_state()
    if model == "gbm":
        params = GbmParams(
            n_rounds=config.gbm_rounds,
            subsample=config.gbm_subsample,
            lr_start=config.gbm_lr_start,
            lr_cap=config.gbm_lr_cap,
            seed=cell_seed,
        )
        booster = fit_gbm(X_tr, y_tr, params)
        F = predict_gbm(booster, X_te)
        return sigmoid(F), gbm_labels(F), "gbm.v1", booster.to_state()
    raise ConfigError(f"no per-horizon fit for model {model!r}")


def run_experiment(
    dataset: CohortDataset,
    config: ExperimentConfig,
    elixhauser=None,
    mhdg=None,
    risky_prefixes=None,
) -> MetricReport:
    config.validate()
    if len(dataset.patients) < 2:
        raise DataError("protocol needs at least two patients to split")
    prefixes = (
        tuple(risky_prefixes) if risky_prefixes is not None else default_risky_prefixes()
    )
    horizons = tuple(sorted(int(h) for h in config.horizons))
    labels = label_outcomes(dataset, prefixes, horizons)
    report = MetricReport()
    models = list(config.models) + ([CLINICIAN_MODEL] if config.clinician else [])

    for seed in config.seeds:
        train_ds, _ = split_patients(dataset, config.train_fraction, derive_seed(seed, "split"))
        train_ids = sorted(p.patient_id for p in train_ds.patients)
        for fs in config.feature_sets:
            matrix = build_feature_matrix(dataset, fs, elixhauser=elixhauser, mhdg=mhdg)
            if matrix.anchors != labels.anchors:
                raise ExperimentError(f"{fs}: feature rows and label rows disagree")
            row_pids = np.array([pid for pid, _ in matrix.anchors])
            train_mask = np.isin(row_pids, train_ids)
            if not train_mask.any() or train_mask.all():
                raise DataError("the patient split left one side without assessment rows")
            filtered, retained = filter_rare_features(
                matrix, train_mask, config.filter_threshold
            )
            X = filtered.values
            X_tr, X_te = X[train_mask], X[~train_mask]
            dnnd_state = None  # (scores matrix for test rows, net) once fitted

            for model in models:
                if model == "dnnd" and dnnd_state is None:
                    cell = model_key("dnnd", fs, "all", seed)
                    try:
                        dnnd_state = _fit_dnnd_cell(
                            X_tr, X_te, labels, horizons, train_mask, config,
                            derive_seed(seed, "dnnd", fs),
                        )
                    except Exception as exc:
                        raise ExperimentError(f"{cell}: {exc}") from exc
                    net, F_te, mean, scale = dnnd_state
                    report.archive.add(
                        cell,
                        "dnnd.v1",
                        net.to_state(),
                        retained,
                        extra={
                            "horizons": list(horizons),
                            "standardize": {"mean": mean.tolist(), "scale": scale.tolist()},
                        },
                    )
                for h in horizons:
                    cell = model_key(model, fs, h, seed)
                    cell_seed = derive_seed(seed, model, fs, h)
                    y = labels.for_horizon(h)
                    y_tr, y_te = y[train_mask], y[~train_mask]
                    try:
                        if model == "dnnd":
                            F = dnnd_state[1][:, horizons.index(h)]
                            score, pred = sigmoid(F), np.where(F >= 0.0, 1, -1)
                        elif model == CLINICIAN_MODEL:
                            ratings = _anchor_ratings(dataset, filtered.anchors)
                            score = ratings[~train_mask]
                            pred = np.where(score >= RATING_MAX / 2.0, 1, -1)
                        elif model == "lasso":
                            score, pred, state = _fit_lasso_cell(
                                X, y, train_mask, row_pids, config, cell_seed, dataset
                            )
                            report.archive.add(cell, "lasso.v1", state, retained)
                        else:
                            score, pred, kind, state = _fit_horizon_model(
                                model, X_tr, y_tr, X_te, config, cell_seed
                            )
                            report.archive.add(cell, kind, state, retained)
                        r, p, f = confusion_metrics(y_te, pred)
                        auc, lo, hi = auc_mann_whitney(y_te, score)
                        report.roc_curves[cell] = roc_points(y_te, score)
                    except ExperimentError:
                        raise
                    except Exception as exc:
                        raise ExperimentError(f"{cell}: {exc}") from exc
                    report.rows.append(
                        MetricRow(
                            model=model,
                            feature_set=fs,
                            horizon_days=int(h),
                            n=int(y_te.size),
                            positives=int(np.sum(y_te == 1)),
                            recall=float(r),
                            precision=float(p),
                            f_measure=float(f),
                            auc=float(auc),
                            auc_ci_lo=float(lo),
                            auc_ci_hi=float(hi),
                            seed=int(seed),
                        )
                    )
    return report


def _fit_dnnd_cell(X_tr, X_te, labels, horizons, train_mask, config, seed):
    Xs_tr, Xs_te, mean, scale = _standardize_for_net(X_tr, X_te)
    Y_tr = np.stack([labels.for_horizon(h) for h in horizons], axis=1)[train_mask]
    arch = NetArchitecture(
        n_inputs=X_tr.shape[1],
        hidden=tuple(config.dnnd_hidden),
        n_tasks=len(horizons),
        dropout_keep=config.dnnd_keep,
    )
    schedule = TrainSchedule(
        minibatch=config.dnnd_minibatch,
        lr_start=config.dnnd_lr_start,
        lr_stop=config.dnnd_lr_stop,
        momentum=config.dnnd_momentum,
        weight_decay=config.dnnd_weight_decay,
        max_norm=config.dnnd_max_norm,
        patience=config.dnnd_patience,
        max_epochs=config.dnnd_max_epochs,
    )
    net, _ = train_dnnd(Xs_tr, Y_tr, arch, schedule, seed=seed)
    F_te = predict_dnnd(net, Xs_te)
    return net, F_te, mean, scale


def _fit_lasso_cell(X, y, train_mask, row_pids, config, cell_seed, dataset):
    train_ds_ids = set(np.unique(row_pids[train_mask]).tolist())
    train_patients = [p for p in dataset.patients if p.patient_id in train_ds_ids]
    inner_train, _ = split_patients(
        CohortDataset(train_patients, schema_version=dataset.schema_version),
        config.lasso_tune_fraction,
        derive_seed(cell_seed, "tune"),
    )
    fit_ids = sorted(p.patient_id for p in inner_train.patients)
    inner_fit = train_mask & np.isin(row_pids, fit_ids)
    inner_val = train_mask & ~inner_fit
    if not inner_fit.any() or not inner_val.any():
        raise DataError("inner tuning split left an empty side")
    grid = default_alpha_grid(X[inner_fit], y[inner_fit], config.lasso_grid_points)
    tuned = tune_penalty(X[inner_fit], y[inner_fit], X[inner_val], y[inner_val], grid)
    final = fit_lasso_logistic(X[train_mask], y[train_mask], tuned.alpha,
                               w0=tuned.model.weights, b0=tuned.model.intercept)
    F = final.decision(X[~train_mask])
    return sigmoid(F), np.where(F >= 0.0, 1, -1), final.to_state()
