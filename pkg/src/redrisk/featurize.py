"""Turn event timelines into labeled, time-binned feature matrices.

One matrix row per (patient, assessment) anchor.  History events are counted
into half-open month intervals [a, b) before the anchor (month = 30 days) and
normalized by interval width; outcome labels look at risky-prefix diagnoses in
the right-closed window (anchor, anchor + horizon].
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .cohort import DEFAULT_HORIZONS, DEMOGRAPHIC_VOCAB, CohortDataset
from .errors import ConfigError, DataError, ParseError, ValidationError

MONTH_DAYS = 30
DEFAULT_INTERVALS = (0, 3, 6, 12, 24, 48)
UNMAPPED_GROUP = "unmapped"

FEATURE_SETS = ("fs1", "fs2", "fs3")

_FS_CHANNELS = {
    "fs1": ("demographics", "icd10", "elixhauser", "mhdg", "life_event"),
    "fs2": ("demographics", "icd10", "elixhauser", "mhdg", "life_event", "assessment"),
    "fs3": ("mhdg", "assessment"),
}

ASSESSMENT_STAT_NAMES = (
    "max_overall",
    "sum_item_max",
    "sum_item_mean",
    "mean_item_sum",
    "max_item_sum",
)


# ---------------------------------------------------------------------------
# mapping tables


@dataclass(frozen=True)
class MappingTable:
    name: str
    prefix_to_group: dict

    def groups(self) -> tuple:
        return tuple(sorted(set(self.prefix_to_group.values())))

    def map_code(self, code: str) -> str:
        """Longest-prefix match; falls back to the reserved unmapped group."""
        code = code.upper()
        for ln in range(len(code), 0, -1):
            group = self.prefix_to_group.get(code[:ln])
            if group is not None:
                return group
        return UNMAPPED_GROUP


def load_mapping_table(path, name: str) -> MappingTable:
    mapping = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "\t" not in line:
                raise ParseError(f"{name} line {lineno}: expected PREFIX<TAB>GROUP")
            prefix, group = line.split("\t", 1)
            prefix = prefix.strip().upper()
            group = group.strip()
            if not prefix or not group:
                raise ParseError(f"{name} line {lineno}: empty prefix or group")
            if prefix in mapping and mapping[prefix] != group:
                raise ValidationError(
                    f"{name} line {lineno}: prefix {prefix!r} mapped to both "
                    f"{mapping[prefix]!r} and {group!r} (ambiguous equal-length prefixes)"
                )
            mapping[prefix] = group
    if UNMAPPED_GROUP in mapping.values():
        raise ValidationError(f"{name}: group name {UNMAPPED_GROUP!r} is reserved")
    return MappingTable(name, mapping)


def load_risky_codes(path) -> tuple:
    prefixes = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if not line.isalnum():
                raise ParseError(f"risky codes line {lineno}: bad prefix {line!r}")
            prefixes.append(line.upper())
    return tuple(prefixes)


def _data_path(filename):
    return resources.files("redrisk.data").joinpath(filename)


def default_elixhauser_table() -> MappingTable:
    return load_mapping_table(_data_path("elixhauser_stub.tsv"), "elixhauser")


def default_mhdg_table() -> MappingTable:
    return load_mapping_table(_data_path("mhdg_stub.tsv"), "mhdg")


def default_risky_prefixes() -> tuple:
    return load_risky_codes(_data_path("risky_codes.txt"))


def map_diagnoses(codes, table: MappingTable) -> dict:
    """Aggregate raw codes into group counts under longest-prefix matching."""
    counts = {}
    for code in codes:
        g = table.map_code(code)
        counts[g] = counts.get(g, 0) + 1
    return counts


# ---------------------------------------------------------------------------
# outcome labels


@dataclass(frozen=True)
class RiskLabelSet:
    horizons: tuple
    anchors: tuple  # ((patient_id, assessment_index), ...)
    labels: np.ndarray  # (n_anchors, n_horizons) values in {-1, +1}

    def for_horizon(self, horizon: int) -> np.ndarray:
        try:
            k = self.horizons.index(horizon)
        except ValueError:
            raise ConfigError(f"horizon {horizon} not in {self.horizons}")
        return self.labels[:, k]

    def prevalence(self, horizon: int) -> float:
        col = self.for_horizon(horizon)
        return float(np.mean(col == 1))


def _sorted_patients(dataset: CohortDataset):
    return sorted(dataset.patients, key=lambda p: p.patient_id)


def label_outcomes(
    dataset: CohortDataset, risky_prefixes, horizons=DEFAULT_HORIZONS
) -> RiskLabelSet:
    """Label every (patient, assessment) anchor at every horizon.

    An anchor is positive at horizon h iff some diagnosis with a risky prefix
    falls in (anchor, anchor + h]; the anchor day itself never counts.
    """
    horizons = tuple(sorted(int(h) for h in horizons))
    if not horizons or horizons[0] <= 0:
        raise ConfigError(f"horizons must be positive, got {horizons}")
    prefixes = tuple(str(p).upper() for p in risky_prefixes)
    if not prefixes:
        raise ConfigError("no risky prefixes supplied")
    anchors = []
    rows = []
    for p in _sorted_patients(dataset):
        risky_days = sorted(
            d for d, code in p.timeline.diagnoses if code.upper().startswith(prefixes)
        )
        for idx, a in enumerate(p.timeline.assessments):
            anchors.append((p.patient_id, idx))
            row = []
            for h in horizons:
                lo = bisect.bisect_right(risky_days, a.day)
                hi = bisect.bisect_right(risky_days, a.day + h)
                row.append(1 if hi > lo else -1)
            rows.append(row)
    labels = (
        np.asarray(rows, dtype=np.int8)
        if rows
        else np.empty((0, len(horizons)), dtype=np.int8)
    )
    return RiskLabelSet(horizons, tuple(anchors), labels)


# ---------------------------------------------------------------------------
# temporal binning


def _bin_bounds_days(boundaries):
    boundaries = tuple(int(b) for b in boundaries)
    if len(boundaries) < 2 or boundaries[0] != 0:
        raise ConfigError(f"interval boundaries must start at 0, got {boundaries}")
    if any(b >= c for b, c in zip(boundaries, boundaries[1:])) :
        raise ConfigError(f"interval boundaries must increase, got {boundaries}")
    return np.array(boundaries, dtype=int) * MONTH_DAYS


def bin_widths(boundaries=DEFAULT_INTERVALS) -> np.ndarray:
    b = tuple(int(x) for x in boundaries)
    return np.diff(np.array(b, dtype=float))


def bin_events(event_days, anchor_day, boundaries=DEFAULT_INTERVALS, weights=None):
    """Count events into [a, b) month intervals before the anchor.

    An event with lag d = anchor_day - event_day lands in interval [a, b)
    iff a*30 <= d < b*30.  Events after the anchor or at lag >= the last
    boundary are dropped.  Counts are normalized by interval width in months;
    optional per-event weights replace the unit count.
    """
    bounds = _bin_bounds_days(boundaries)
    days = np.asarray(event_days, dtype=int)
    if weights is None:
        w = np.ones(days.shape, dtype=float)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != days.shape:
            raise ConfigError("weights must align with event_days")
    lags = int(anchor_day) - days
    valid = (lags >= 0) & (lags < bounds[-1])
    idx = np.searchsorted(bounds, lags[valid], side="right") - 1
    counts = np.zeros(len(bounds) - 1, dtype=float)
    np.add.at(counts, idx, w[valid])
    return counts / bin_widths(boundaries)


# ---------------------------------------------------------------------------
# assessment aggregation


def aggregate_assessments(assessments) -> tuple:
    """Five summary statistics over an anchor's assessment history.

    Returns (max over time of overall rating,
             sum over items of per-item max over time,
             sum over items of per-item mean over time,
             mean over time of per-assessment item sum,
             max over time of per-assessment item sum).
    """
    if not assessments:
        raise DataError("assessment history is empty; anchors are assessments")
    items = np.array([a.item_ratings for a in assessments], dtype=float)
    overall = np.array([a.overall_rating for a in assessments], dtype=float)
    item_sums = items.sum(axis=1)
    return (
        float(overall.max()),
        float(items.max(axis=0).sum()),
        float(items.mean(axis=0).sum()),
        float(item_sums.mean()),
        float(item_sums.max()),
    )


# ---------------------------------------------------------------------------
# feature matrices


@dataclass
class FeatureMatrix:
    feature_set_id: str
    anchors: tuple
    columns: tuple
    groups: tuple
    values: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    def column_index(self, name: str) -> int:
        try:
            return self.columns.index(name)
        except ValueError:
            raise ConfigError(f"no column named {name!r}")

    def select_columns(self, col_idx) -> "FeatureMatrix":
        col_idx = list(col_idx)
        return FeatureMatrix(
            self.feature_set_id,
            self.anchors,
            tuple(self.columns[i] for i in col_idx),
            tuple(self.groups[i] for i in col_idx),
            self.values[:, col_idx].copy(),
        )


def _demographic_columns():
    cols = []
    for fld, cats in DEMOGRAPHIC_VOCAB.items():
        for cat in cats:
            cols.append(f"demo:{fld}={cat}")
    return cols


def build_feature_matrix(
    dataset: CohortDataset,
    feature_set_id: str,
    elixhauser: MappingTable | None = None,
    mhdg: MappingTable | None = None,
    boundaries=DEFAULT_INTERVALS,
) -> FeatureMatrix:
    """Assemble the per-anchor design matrix for one feature-set definition.

    fs1 = demographics + binned raw ICD-10 prefixes + binned Elixhauser groups
    + binned MHDG groups + binned life events; fs2 = fs1 + assessment channel;
    fs3 = MHDG + assessment channel only.  The raw-prefix column universe is
    derived from the dataset passed in; rare columns are pruned separately by
    ``filter_rare_features``.
    """
    fs = feature_set_id.lower()
    if fs not in _FS_CHANNELS:
        raise ConfigError(f"unknown feature set {feature_set_id!r}; expected one of {FEATURE_SETS}")
    channels = _FS_CHANNELS[fs]
    elixhauser = elixhauser if elixhauser is not None else default_elixhauser_table()
    mhdg = mhdg if mhdg is not None else default_mhdg_table()
    bounds = _bin_bounds_days(boundaries)
    n_bins = len(bounds) - 1
    widths = bin_widths(boundaries)

    patients = _sorted_patients(dataset)
    prefixes = sorted({code[:3].upper() for p in patients for _, code in p.timeline.diagnoses})

    columns: list = []
    groups: list = []
    width_div: list = []

    def add_binned_block(family, keys):
        bases = {}
        for key in keys:
            bases[key] = len(columns)
            for k, (a, b) in enumerate(zip(boundaries, boundaries[1:])):
                columns.append(f"{family}:{key}:m{a}_{b}")
                groups.append(family)
                width_div.append(widths[k])
        return bases

    # NB: column layout is contiguous per key so a row write is base + bin.
    icd_base = elix_base = mhdg_base = life_base = assess_base = None
    demo_base = None
    if "demographics" in channels:
        demo_base = len(columns)
        for name in _demographic_columns():
            columns.append(name)
            groups.append("demographics")
            width_div.append(1.0)
    if "icd10" in channels:
        icd_base = add_binned_block("icd10", prefixes)
    if "elixhauser" in channels:
        elix_base = add_binned_block("elixhauser", elixhauser.groups() + (UNMAPPED_GROUP,))
    if "mhdg" in channels:
        mhdg_base = add_binned_block("mhdg", mhdg.groups() + (UNMAPPED_GROUP,))
    if "life_event" in channels:
        life_base = add_binned_block("life_event", ("move",))
    if "assessment" in channels:
        assess_base = add_binned_block("assessment", ("overall",))
        stat_base = len(columns)
        for s in ASSESSMENT_STAT_NAMES:
            columns.append(f"assessment:{s}")
            groups.append("assessment")
            width_div.append(1.0)

    div = np.asarray(width_div, dtype=float)

    demo_index = {}
    if demo_base is not None:
        off = demo_base
        for fld, cats in DEMOGRAPHIC_VOCAB.items():
            for cat in cats:
                demo_index[(fld, cat)] = off
                off += 1

    anchors = []
    rows = []
    prefix_pos = {pre: i for i, pre in enumerate(prefixes)}
    elix_groups = elixhauser.groups() + (UNMAPPED_GROUP,)
    mhdg_groups = mhdg.groups() + (UNMAPPED_GROUP,)
    elix_pos = {g: i for i, g in enumerate(elix_groups)}
    mhdg_pos = {g: i for i, g in enumerate(mhdg_groups)}

    for p in patients:
        diag_days = np.array([d for d, _ in p.timeline.diagnoses], dtype=int)
        diag_codes = [c for _, c in p.timeline.diagnoses]
        code_prefix = np.array([prefix_pos[c[:3].upper()] for c in diag_codes], dtype=int)
        code_elix = np.array([elix_pos[elixhauser.map_code(c)] for c in diag_codes], dtype=int)
        code_mhdg = np.array([mhdg_pos[mhdg.map_code(c)] for c in diag_codes], dtype=int)
        move_days = np.array(p.timeline.postcode_changes, dtype=int)
        a_days = np.array([a.day for a in p.timeline.assessments], dtype=int)
        a_overall = np.array([a.overall_rating for a in p.timeline.assessments], dtype=float)

        for idx, a in enumerate(p.timeline.assessments):
            anchors.append((p.patient_id, idx))
            row = np.zeros(len(columns))
            if demo_base is not None:
                for fld in DEMOGRAPHIC_VOCAB:
                    row[demo_index[(fld, getattr(p.demographics, fld))]] = 1.0
            if diag_days.size:
                lags = a.day - diag_days
                valid = (lags >= 0) & (lags < bounds[-1])
                if valid.any():
                    b = np.searchsorted(bounds, lags[valid], side="right") - 1
                    if icd_base is not None:
                        base0 = icd_base[prefixes[0]] if prefixes else 0
                        cols = base0 + code_prefix[valid] * n_bins + b
                        np.add.at(row, cols, 1.0)
                    if elix_base is not None:
                        base0 = elix_base[elix_groups[0]]
                        np.add.at(row, base0 + code_elix[valid] * n_bins + b, 1.0)
                    if mhdg_base is not None:
                        base0 = mhdg_base[mhdg_groups[0]]
                        np.add.at(row, base0 + code_mhdg[valid] * n_bins + b, 1.0)
            if life_base is not None and move_days.size:
                lags = a.day - move_days
                valid = (lags >= 0) & (lags < bounds[-1])
                if valid.any():
                    b = np.searchsorted(bounds, lags[valid], side="right") - 1
                    np.add.at(row, life_base["move"] + b, 1.0)
            if assess_base is not None:
                hist_n = bisect.bisect_right([x.day for x in p.timeline.assessments], a.day)
                lags = a.day - a_days[:hist_n]
                valid = (lags >= 0) & (lags < bounds[-1])
                if valid.any():
                    b = np.searchsorted(bounds, lags[valid], side="right") - 1
                    np.add.at(row, assess_base["overall"] + b, a_overall[:hist_n][valid])
                stats = aggregate_assessments(p.timeline.assessments[:hist_n])
                row[stat_base : stat_base + len(stats)] = stats
            rows.append(row)

    values = np.vstack(rows) if rows else np.empty((0, len(columns)))
    values = values / div[None, :]
    return FeatureMatrix(fs, tuple(anchors), tuple(columns), tuple(groups), values)


def filter_rare_features(matrix: FeatureMatrix, train_rows, threshold: float = 0.01):
    """Drop columns nonzero in fewer than ``threshold`` of the TRAIN rows.

    ``train_rows`` is a boolean mask or index array over matrix rows; the
    retained column list is applied to every row, so validation rows see the
    identical columns.  Returns (filtered matrix, retained column names).
    """
    if not (0.0 < threshold <= 1.0):
        raise ConfigError(f"threshold must lie in (0, 1], got {threshold}")
    train = matrix.values[train_rows]
    if train.shape[0] == 0:
        raise DataError("no train rows to fit the rare-feature filter on")
    frac = (train != 0).mean(axis=0)
    keep = np.nonzero(frac >= threshold)[0]
    if keep.size == 0:
        raise DataError(
            f"every column fell below the {threshold:.2%} activity threshold; lower it"
        )
    filtered = matrix.select_columns(keep)
    return filtered, list(filtered.columns)


def save_matrix_csv(matrix: FeatureMatrix, labels: RiskLabelSet, path) -> None:
    """Write labels then features, one row per anchor, aligned by anchor key."""
    if labels.anchors != matrix.anchors:
        raise DataError("label set and feature matrix cover different anchors")
    header = [f"label_{h}" for h in labels.horizons] + list(matrix.columns)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(header) + "\n")
        for i in range(matrix.n_rows):
            parts = [str(int(v)) for v in labels.labels[i]]
            parts += [repr(float(v)) for v in matrix.values[i]]
            fh.write(",".join(parts) + "\n")
