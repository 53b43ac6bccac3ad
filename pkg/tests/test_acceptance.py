"""Release gate: nine end-to-end checks over the whole package.

Each test states its tolerance and time budget inline and the conftest hook
prints one PASS/FAIL line per check.  The protocol-scale tests at the bottom
take several minutes each; the rest finish in seconds.
"""

import time

import numpy as np
import pytest

from redrisk.archive import model_key, restore_model, save_model_archive
from redrisk.cohort import (
    RATING_MAX,
    AssessmentEvent,
    CohortDataset,
    EventTimeline,
    PatientRecord,
    SyntheticConfig,
    generate_synthetic_cohort,
)
from redrisk.config import build_settings
from redrisk.ensemble import GbmParams, fit_gbm, gbm_pseudo_residuals
from redrisk.eval import ExperimentConfig, run_experiment
from redrisk.featurize import (
    build_feature_matrix,
    default_risky_prefixes,
    label_outcomes,
)
from redrisk.linear import (
    default_alpha_grid,
    fit_lasso_logistic,
    kkt_violation,
)
from redrisk.neuralnet import (
    NetArchitecture,
    backward_dropout,
    draw_masks,
    forward_dropout,
    init_network,
    multitask_loss,
)
from redrisk.eval import auc_mann_whitney, roc_points


# ---------------------------------------------------------------------------
# 1. network gradients against central finite differences


def _fd_network_grads(net, X, Y, masks, h=1e-5):
    grads_w = [np.zeros_like(w) for w in net.weights]
    grads_b = [np.zeros_like(b) for b in net.biases]

    def loss():
        s, _ = forward_dropout(net, X, mode="train", masks=masks)
        return multitask_loss(s, Y)

    for store, tensors in ((grads_w, net.weights), (grads_b, net.biases)):
        for l, tensor in enumerate(tensors):
            for idx in np.ndindex(tensor.shape):
                keep = tensor[idx]
                tensor[idx] = keep + h
                up = loss()
                tensor[idx] = keep - h
                dn = loss()
                tensor[idx] = keep
                store[l][idx] = (up - dn) / (2 * h)
    return grads_w + grads_b


def test_network_gradients_match_finite_differences():
    """Analytic backprop agrees with central differences to a relative
    error of 1e-4 over 20 random layouts under fixed dropout masks, in
    under 30 seconds."""
    rng = np.random.default_rng(11)
    start = time.perf_counter()
    checked = 0
    attempts = 0
    worst = 0.0
    while checked < 20:
        attempts += 1
        assert attempts < 60
        n_in = int(rng.integers(3, 9))
        depth = int(rng.integers(1, 3))
        hidden = tuple(int(rng.integers(4, 11)) for _ in range(depth))
        n_tasks = int(rng.integers(1, 5))
        keep = float(rng.uniform(0.4, 0.9))
        arch = NetArchitecture(n_inputs=n_in, hidden=hidden, n_tasks=n_tasks,
                               dropout_keep=keep)
        net = init_network(arch, seed=int(rng.integers(1 << 30)))
        for b in net.biases:
            b += rng.uniform(0.1, 0.3, size=b.shape)
        batch = int(rng.integers(2, 7))
        X = rng.standard_normal((batch, n_in))
        Y = rng.choice([-1.0, 1.0], size=(batch, n_tasks))
        masks = draw_masks(arch, batch, rng)
        scores, cache = forward_dropout(net, X, mode="train", masks=masks)
        if min(np.abs(z).min() for z in cache["pre"]) < 1e-3:
            continue  # resample: differencing across a ReLU kink is meaningless
        grads = backward_dropout(net, scores, cache, Y)
        fd = _fd_network_grads(net, X, Y, masks)
        for g, f in zip(grads["weights"] + grads["biases"], fd):
            scale = max(np.abs(f).max(), 1e-8)
            worst = max(worst, float(np.abs(g - f).max() / scale))
        checked += 1
    assert worst <= 1e-4, f"worst relative gradient error {worst:.3g}"
    assert time.perf_counter() - start <= 30.0


# ---------------------------------------------------------------------------
# 2. boosting residuals and monotone training loss


def test_boosting_residuals_and_monotone_training_loss():
    """Pseudo-residuals equal the negative slope of the per-row log-loss to
    1e-6, and a 200-round fit on a 5000x134 problem never lets the
    full-training loss rise, in under 60 seconds."""
    start = time.perf_counter()
    rng = np.random.default_rng(17)
    X = rng.standard_normal((5000, 134))
    w = np.zeros(134)
    w[:8] = rng.uniform(0.4, 1.0, size=8) * rng.choice([-1.0, 1.0], size=8)
    y = np.where(X @ w + 0.8 * rng.standard_normal(5000) > 0, 1, -1)

    # bounded scores keep the difference quotient well scaled
    F = rng.standard_normal(5000)
    h = 1e-5
    slope = (np.logaddexp(0.0, -y * (F + h)) - np.logaddexp(0.0, -y * (F - h))) / (2 * h)
    residuals = gbm_pseudo_residuals(y, F)
    assert np.abs(residuals + slope).max() <= 1e-6

    model = fit_gbm(X, y, GbmParams(n_rounds=200, seed=2))
    losses = np.asarray(model.loss_history)
    assert losses.shape == (201,)
    assert (np.diff(losses) <= 0).all(), "a boosting step increased the training loss"
    assert losses[-1] < losses[0]
    assert time.perf_counter() - start <= 60.0


# ---------------------------------------------------------------------------
# 3. AUC by rank statistic, pair counting, and trapezoidal ROC


def _pair_count_auc(y, s):
    pos = s[y > 0][:, None]
    neg = s[y <= 0][None, :]
    wins = (pos > neg).sum() + 0.5 * (pos == neg).sum()
    return float(wins) / (pos.shape[0] * neg.shape[1])


def test_auc_pair_counting_agrees_with_trapezoidal_roc():
    """Three independent routes to the AUC agree to 1e-12 on 100 random
    score sets, a third of them with heavy ties, plus one exact hand case."""
    y = np.array([1, 1, -1, -1])
    s = np.array([0.9, 0.4, 0.6, 0.1])
    assert auc_mann_whitney(y, s)[0] == 0.75

    rng = np.random.default_rng(31)
    checked = 0
    while checked < 100:
        n = int(rng.integers(6, 80))
        y = rng.choice([-1, 1], size=n)
        if (y > 0).all() or (y < 0).all():
            continue
        if checked % 3 == 0:
            s = rng.integers(0, 3, size=n).astype(float)
        elif checked % 3 == 1:
            s = rng.standard_normal(n)
        else:
            s = np.round(rng.standard_normal(n), 1)
        pairs = _pair_count_auc(y, s)
        pts = roc_points(y, s)
        trap = float(np.trapezoid(pts[:, 2], pts[:, 1]))
        ranked, _, _ = auc_mann_whitney(y, s)
        assert abs(pairs - trap) <= 1e-12
        assert abs(ranked - pairs) <= 1e-12
        checked += 1


# ---------------------------------------------------------------------------
# 4. test-mode scaling equals Monte Carlo dropout averaging


def test_dropout_scaling_matches_monte_carlo_averaging():
    """With one hidden layer biased into the always-active region, the
    scaled test-mode output sits within three standard errors of the mean
    of 20,000 masked train-mode passes."""
    rng = np.random.default_rng(7)
    cases = [
        (6, 0.5, "random"),
        (6, 0.5, "zero"),
        (9, 0.8, "random"),
    ]
    for width, keep, x_kind in cases:
        arch = NetArchitecture(n_inputs=4, hidden=(width,), n_tasks=3,
                               dropout_keep=keep)
        net = init_network(arch, seed=int(rng.integers(1 << 30)))
        net.weights[0][:] = rng.uniform(-0.5, 0.5, size=net.weights[0].shape)
        net.biases[0][:] = 5.0
        net.weights[1][:] = rng.uniform(-1.0, 1.0, size=net.weights[1].shape)
        net.biases[1][:] = rng.uniform(-0.5, 0.5, size=net.biases[1].shape)
        x = np.zeros(4) if x_kind == "zero" else rng.uniform(-1.0, 1.0, size=4)
        # every mask realization keeps the hidden layer strictly active
        assert (np.abs(net.weights[0]).sum(axis=1) < 5.0).all()

        reference, _ = forward_dropout(net, x[None, :], mode="test")
        draws = 20_000
        sampled, _ = forward_dropout(
            net, np.tile(x, (draws, 1)), mode="train", rng=rng
        )
        mc_mean = sampled.mean(axis=0)
        se = sampled.std(axis=0, ddof=1) / np.sqrt(draws)
        gap = np.abs(mc_mean - reference[0])
        assert (gap <= 3.0 * se).all(), f"worst z-score {(gap / se).max():.2f}"


# ---------------------------------------------------------------------------
# 5. full protocol: 90 rows, byte-identical reruns, bounded runtime


@pytest.mark.slow
def test_full_protocol_emits_90_reproducible_rows(tmp_path):
    """The default configuration (5 models x 3 feature sets x 6 horizons at
    n=7399) emits exactly 90 metric rows in under 10 minutes, and a rerun
    reproduces the metrics CSV and the model archive byte for byte."""
    settings = build_settings("")
    start = time.perf_counter()
    dataset = generate_synthetic_cohort(settings.synthetic, seed=settings.gen_seed)
    report = run_experiment(dataset, settings.experiment)
    elapsed = time.perf_counter() - start

    assert len(report.rows) == 90
    cells = {(r.model, r.feature_set, r.horizon_days) for r in report.rows}
    assert len(cells) == 90
    assert {r.model for r in report.rows} == {"cart", "lasso", "rf", "gbm", "dnnd"}
    assert {r.feature_set for r in report.rows} == {"fs1", "fs2", "fs3"}
    assert {r.horizon_days for r in report.rows} == {15, 30, 60, 90, 180, 360}
    assert elapsed <= 600.0, f"protocol run took {elapsed:.0f}s"

    csv_text = report.to_csv()
    first = tmp_path / "first.json.gz"
    save_model_archive(report.archive, first)
    del report, dataset

    dataset = generate_synthetic_cohort(settings.synthetic, seed=settings.gen_seed)
    rerun = run_experiment(dataset, settings.experiment)
    assert rerun.to_csv() == csv_text
    second = tmp_path / "second.json.gz"
    save_model_archive(rerun.archive, second)
    assert first.read_bytes() == second.read_bytes()


# ---------------------------------------------------------------------------
# 6. randomized methods beat the sparse linear baseline and tolerate
#    duplicated inputs; the baseline's support does not


RANDOMIZED = ("rf", "gbm", "dnnd")


def _qualitative_runs(redundancy):
    cohort = generate_synthetic_cohort(
        SyntheticConfig(n_patients=1500, signal_strength=0.8,
                        redundancy_factor=redundancy),
        seed=1,
    )
    config = ExperimentConfig(
        models=("lasso",) + RANDOMIZED,
        feature_sets=("fs2",),
        horizons=(360,),
        seeds=tuple(range(1, 11)),
    )
    report = run_experiment(cohort, config)
    auc = {(r.model, r.seed): r.auc for r in report.rows}
    assert len(auc) == 4 * 10
    return auc, report.archive


def _support(archive, seed):
    entry = archive.get(model_key("lasso", "fs2", 360, seed))
    model = restore_model(entry)
    return frozenset(
        name for name, w in zip(entry["columns"], model.weights) if w != 0.0
    )


@pytest.mark.slow
def test_randomized_models_beat_sparse_linear_and_shrug_off_duplicates():
    """On a planted-nonlinear cohort (signal 0.8, 10 seeds) every randomized
    method's median validation AUC beats the penalized linear baseline by at
    least 0.03; duplicating the informative channels five-fold degrades each
    randomized method's median paired AUC by at most 0.03 while the baseline's
    selected support becomes unstable (mean pairwise Jaccard overlap across
    seeds below 0.6)."""
    seeds = range(1, 11)
    base_auc, _ = _qualitative_runs(redundancy=0)
    dup_auc, dup_archive = _qualitative_runs(redundancy=5)

    lasso_median = float(np.median([base_auc[("lasso", s)] for s in seeds]))
    for model in RANDOMIZED:
        med = float(np.median([base_auc[(model, s)] for s in seeds]))
        assert med - lasso_median >= 0.03, (
            f"{model} median {med:.3f} vs lasso {lasso_median:.3f}"
        )

    for model in RANDOMIZED:
        drops = [base_auc[(model, s)] - dup_auc[(model, s)] for s in seeds]
        assert float(np.median(drops)) <= 0.03, f"{model} degradation {drops}"

    supports = [_support(dup_archive, s) for s in seeds]
    overlaps = []
    for i in range(len(supports)):
        for j in range(i + 1, len(supports)):
            union = supports[i] | supports[j]
            overlaps.append(
                len(supports[i] & supports[j]) / len(union) if union else 1.0
            )
    assert float(np.mean(overlaps)) < 0.6, f"mean Jaccard {np.mean(overlaps):.3f}"


# ---------------------------------------------------------------------------
# 7. generated prevalence is monotone and hits the calibration targets


def test_generated_prevalence_tracks_targets_monotonically():
    """Label prevalence never decreases with the horizon for any seed, and
    at n=3700 the 30/60/90/180-day rates land within 1.5 points of the
    7.1/10.3/13.1/18.6% targets."""
    targets = {30: 0.071, 60: 0.103, 90: 0.131, 180: 0.186}
    horizons = (15, 30, 60, 90, 180, 360)
    risky = default_risky_prefixes()
    for seed in (1, 2, 3, 4, 5):
        cohort = generate_synthetic_cohort(SyntheticConfig(n_patients=3700), seed=seed)
        labels = label_outcomes(cohort, risky, horizons)
        rates = [labels.prevalence(h) for h in horizons]
        assert (np.diff(rates) >= 0).all(), f"seed {seed}: {rates}"
        for h, target in targets.items():
            rate = labels.prevalence(h)
            assert abs(rate - target) <= 0.015, (
                f"seed {seed}, horizon {h}: {rate:.3f} vs {target:.3f}"
            )


# ---------------------------------------------------------------------------
# 8. penalized fits are optimal and sparsity is monotone in the penalty


def test_penalized_fits_satisfy_optimality_and_sparsity_monotone():
    """Every converged fit along the default penalty grid passes the
    subgradient optimality check to 1e-4, and the support never grows as
    the penalty grows, on well-conditioned gaussian designs."""
    for seed in (0, 3):
        rng = np.random.default_rng(seed)
        X = rng.standard_normal((600, 15))
        w = np.zeros(15)
        w[:5] = rng.uniform(0.8, 1.6, size=5) * rng.choice([-1.0, 1.0], size=5)
        y = np.where(X @ w + rng.standard_normal(600) > 0, 1, -1)

        alphas = default_alpha_grid(X, y)
        assert (np.diff(alphas) > 0).all()
        nnz = []
        for alpha in alphas:
            model = fit_lasso_logistic(X, y, alpha)
            assert model.converged
            assert kkt_violation(model, X, y) <= 1e-4
            nnz.append(int(np.count_nonzero(model.weights)))
        assert (np.diff(nnz) <= 0).all(), f"support sizes not monotone: {nnz}"
        # the grid top sits exactly on the smallest penalty that empties the
        # support, so one borderline coefficient of float-noise size may survive
        assert nnz[-1] <= 1
        assert nnz[0] >= 5


# ---------------------------------------------------------------------------
# 9. features never read the future, labels never read the past


def _with_timeline(dataset, patient_pos, timeline):
    patients = list(dataset.patients)
    old = patients[patient_pos]
    timeline.sort()
    patients[patient_pos] = PatientRecord(old.patient_id, old.demographics, timeline)
    return CohortDataset(patients=patients, schema_version=dataset.schema_version)


def _copy_timeline(t):
    return EventTimeline(list(t.diagnoses), list(t.postcode_changes),
                         list(t.assessments))


def _assert_rows_match_by_name(base, mutated, row_mask):
    """Feature rows compared by column name; a column absent on one side
    must read zero on the other (code swaps shift the raw-prefix universe)."""
    if not row_mask.any():
        return
    mut_pos = {name: j for j, name in enumerate(mutated.columns)}
    both_b, both_m, only_b = [], [], []
    for i, name in enumerate(base.columns):
        j = mut_pos.pop(name, None)
        if j is None:
            only_b.append(i)
        else:
            both_b.append(i)
            both_m.append(j)
    only_m = list(mut_pos.values())
    rows_b = base.values[row_mask]
    rows_m = mutated.values[row_mask]
    assert np.array_equal(rows_b[:, both_b], rows_m[:, both_m])
    if only_b:
        assert not rows_b[:, only_b].any()
    if only_m:
        assert not rows_m[:, only_m].any()


@pytest.mark.slow
def test_features_ignore_the_future_and_labels_ignore_the_past():
    """Exhaustive mutation check on a 50-patient cohort: editing any event
    leaves every strictly earlier anchor's feature row untouched, and no
    edit at or before an anchor ever changes that anchor's labels."""
    cohort = generate_synthetic_cohort(SyntheticConfig(n_patients=50), seed=23)
    horizons = (15, 30, 60, 90, 180, 360)
    risky = default_risky_prefixes()

    base_matrix = build_feature_matrix(cohort, "fs2")
    base_labels = label_outcomes(cohort, risky, horizons)
    by_id = {p.patient_id: p for p in cohort.patients}
    anchor_pid = np.array([pid for pid, _ in base_matrix.anchors])
    anchor_day = np.array(
        [by_id[pid].timeline.assessments[idx].day for pid, idx in base_matrix.anchors]
    )

    n_events = 0
    for pos, patient in enumerate(cohort.patients):
        timeline = patient.timeline
        mutations = []
        for k, (day, code) in enumerate(timeline.diagnoses):
            swapped = "Z97" if code.startswith("Z98") else "Z98"
            t = _copy_timeline(timeline)
            t.diagnoses[k] = (day, swapped)
            mutations.append(("diag", day, t))
        for k, day in enumerate(timeline.postcode_changes):
            t = _copy_timeline(timeline)
            t.postcode_changes[k] = day + 1
            mutations.append(("move", day, t))
        for k, a in enumerate(timeline.assessments):
            t = _copy_timeline(timeline)
            t.assessments[k] = AssessmentEvent(
                day=a.day,
                item_ratings=tuple(RATING_MAX - r for r in a.item_ratings),
                overall_rating=RATING_MAX - a.overall_rating,
            )
            mutations.append(("assess", a.day, t))

        for kind, day, timeline_mut in mutations:
            n_events += 1
            mutated = _with_timeline(cohort, pos, timeline_mut)
            matrix = build_feature_matrix(mutated, "fs2")
            labels = label_outcomes(mutated, risky, horizons)
            assert matrix.anchors == base_matrix.anchors
            assert labels.anchors == base_labels.anchors

            other = anchor_pid != patient.patient_id
            earlier = anchor_day < day
            _assert_rows_match_by_name(base_matrix, matrix, other | earlier)

            if kind == "diag":
                label_mask = other | (anchor_day >= day)
            else:
                label_mask = np.ones(len(anchor_pid), dtype=bool)
            assert np.array_equal(
                base_labels.labels[label_mask], labels.labels[label_mask]
            )
    assert n_events >= 500  # the cohort must actually exercise the guard
