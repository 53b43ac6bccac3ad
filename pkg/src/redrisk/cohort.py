"""Patient cohorts: domain types, file formats, splitting, and a calibrated
synthetic generator.

A cohort is a set of patients, each carrying demographics and an event
timeline (diagnoses, postcode changes, structured risk assessments).  All
dates are integer day offsets from an arbitrary per-cohort epoch.

Two on-disk formats are supported:

* ``event-lines``: one JSON object per line, record kinds ``demo`` / ``diag``
  / ``move`` / ``assess``, each carrying ``patient_id`` and ``day``.  A
  patient is introduced by its ``demo`` record.
* ``cohort-archive``: a single versioned JSON document with a
  ``{"magic", "schema_version"}`` header.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ParseError, ValidationError

SCHEMA_VERSION = 1
ARCHIVE_MAGIC = "redrisk-cohort"

N_ITEMS = 18
RATING_MAX = 4

DEFAULT_HORIZONS = (15, 30, 60, 90, 180, 360)

# Closed category vocabularies; demo records and generator marginals are
# validated against these.
DEMOGRAPHIC_VOCAB = {
    "gender": ("female", "male"),
    "age_band": ("under_21", "21_35", "36_50", "51_65", "over_65"),
    "marital_status": ("single", "married", "divorced_separated", "other"),
    "occupation": ("unemployed_home_duties", "pensioner_retired", "other"),
    "language": ("english", "other"),
    "country_of_birth": ("australia", "other"),
    "religion": ("none", "christian", "other"),
    "indigenous_status": ("non_indigenous", "indigenous", "unknown"),
}

DEMOGRAPHIC_FIELDS = tuple(DEMOGRAPHIC_VOCAB)

_CODE_PATTERN = re.compile(r"^[A-Z][0-9]{2}(\.[0-9A-Z]{1,3})?$")


@dataclass(frozen=True)
class Demographics:
    gender: str
    age_band: str
    marital_status: str
    occupation: str
    language: str
    country_of_birth: str
    religion: str
    indigenous_status: str

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in DEMOGRAPHIC_FIELDS}


@dataclass(frozen=True)
class AssessmentEvent:
    """One structured risk assessment: 18 ordinal item ratings plus an
    overall clinician rating, all in 0..RATING_MAX."""

    day: int
    item_ratings: tuple
    overall_rating: int

    def __post_init__(self):
        if len(self.item_ratings) != N_ITEMS:
            raise ValidationError(
                f"assessment needs {N_ITEMS} item ratings, got {len(self.item_ratings)}"
            )
        for r in tuple(self.item_ratings) + (self.overall_rating,):
            if not (0 <= int(r) <= RATING_MAX):
                raise ValidationError(f"rating {r} outside 0..{RATING_MAX}")


@dataclass
class EventTimeline:
    diagnoses: list = field(default_factory=list)  # [(day, code), ...]
    postcode_changes: list = field(default_factory=list)  # [day, ...]
    assessments: list = field(default_factory=list)  # [AssessmentEvent, ...]

    def sort(self):
        self.diagnoses.sort(key=lambda e: (e[0], e[1]))
        self.postcode_changes.sort()
        self.assessments.sort(key=lambda a: a.day)


@dataclass
class PatientRecord:
    patient_id: str
    demographics: Demographics
    timeline: EventTimeline


@dataclass
class CohortDataset:
    patients: list
    schema_version: int = SCHEMA_VERSION

    def __len__(self):
        return len(self.patients)

    def n_assessments(self) -> int:
        return sum(len(p.timeline.assessments) for p in self.patients)


def validate_cohort(dataset: CohortDataset) -> list:
    """Check dataset invariants; returns a list of non-fatal warnings.

    Raises ValidationError on duplicate patient ids.  Diagnosis codes that do
    not follow the letter+digits(+subcode) pattern are allowed but flagged.
    """
    warnings = []
    seen = set()
    for p in dataset.patients:
        if p.patient_id in seen:
            raise ValidationError(f"duplicate patient_id {p.patient_id!r}")
        seen.add(p.patient_id)
        for f in DEMOGRAPHIC_FIELDS:
            v = getattr(p.demographics, f)
            if v not in DEMOGRAPHIC_VOCAB[f]:
                raise ValidationError(
                    f"patient {p.patient_id}: {f}={v!r} not in vocabulary"
                )
        days = [a.day for a in p.timeline.assessments]
        if days != sorted(days):
            raise ValidationError(f"patient {p.patient_id}: assessments out of order")
        for _, code in p.timeline.diagnoses:
            if not _CODE_PATTERN.match(code):
                warnings.append(f"patient {p.patient_id}: nonstandard code {code!r}")
    return warnings


# ---------------------------------------------------------------------------
# file formats


def _patient_to_obj(p: PatientRecord) -> dict:
    return {
        "patient_id": p.patient_id,
        "demographics": p.demographics.as_dict(),
        "diagnoses": [[int(d), c] for d, c in p.timeline.diagnoses],
        "moves": [int(d) for d in p.timeline.postcode_changes],
        "assessments": [
            {
                "day": int(a.day),
                "items": [int(r) for r in a.item_ratings],
                "overall": int(a.overall_rating),
            }
            for a in p.timeline.assessments
        ],
    }


def _patient_from_obj(obj: dict, where: str) -> PatientRecord:
    try:
        demo = Demographics(**obj["demographics"])
        timeline = EventTimeline(
            diagnoses=[(int(d), str(c)) for d, c in obj["diagnoses"]],
            postcode_changes=[int(d) for d in obj["moves"]],
            assessments=[
                AssessmentEvent(int(a["day"]), tuple(int(r) for r in a["items"]), int(a["overall"]))
                for a in obj["assessments"]
            ],
        )
        return PatientRecord(str(obj["patient_id"]), demo, timeline)
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{where}: malformed patient record ({exc})") from exc


def save_cohort(dataset: CohortDataset, path, format: str = "cohort-archive") -> None:
    if format == "cohort-archive":
        doc = {
            "magic": ARCHIVE_MAGIC,
            "schema_version": dataset.schema_version,
            "patients": [_patient_to_obj(p) for p in dataset.patients],
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")))
            fh.write("\n")
    elif format == "event-lines":
        with open(path, "w", encoding="utf-8") as fh:
            for p in dataset.patients:
                rec = {"kind": "demo", "patient_id": p.patient_id, "day": 0}
                rec.update(p.demographics.as_dict())
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
                for d, c in p.timeline.diagnoses:
                    fh.write(
                        json.dumps(
                            {"kind": "diag", "patient_id": p.patient_id, "day": int(d), "code": c},
                            sort_keys=True,
                        )
                        + "\n"
                    )
                for d in p.timeline.postcode_changes:
                    fh.write(
                        json.dumps(
                            {"kind": "move", "patient_id": p.patient_id, "day": int(d)},
                            sort_keys=True,
                        )
                        + "\n"
                    )
                for a in p.timeline.assessments:
                    fh.write(
                        json.dumps(
                            {
                                "kind": "assess",
                                "patient_id": p.patient_id,
                                "day": int(a.day),
                                "items": [int(r) for r in a.item_ratings],
                                "overall": int(a.overall_rating),
                            },
                            sort_keys=True,
                        )
                        + "\n"
                    )
    else:
        raise ConfigError(f"unknown cohort format {format!r}")


def _load_event_lines(path) -> CohortDataset:
    patients = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(rec, dict) or "kind" not in rec:
                raise ParseError(f"line {lineno}: record has no kind")
            kind = rec["kind"]
            try:
                pid = str(rec["patient_id"])
                day = int(rec["day"])
            except (KeyError, TypeError, ValueError):
                raise ParseError(f"line {lineno}: missing patient_id or day")
            if kind == "demo":
                if pid in patients:
                    raise ValidationError(f"line {lineno}: duplicate patient_id {pid!r}")
                try:
                    demo = Demographics(**{f: rec[f] for f in DEMOGRAPHIC_FIELDS})
                except KeyError as exc:
                    raise ParseError(f"line {lineno}: demo record missing {exc}")
                patients[pid] = PatientRecord(pid, demo, EventTimeline())
                continue
            if pid not in patients:
                raise ValidationError(
                    f"line {lineno}: event for unknown patient_id {pid!r} (demo record must come first)"
                )
            tl = patients[pid].timeline
            if kind == "diag":
                if "code" not in rec:
                    raise ParseError(f"line {lineno}: diag record missing code")
                tl.diagnoses.append((day, str(rec["code"])))
            elif kind == "move":
                tl.postcode_changes.append(day)
            elif kind == "assess":
                items = rec.get("items")
                if not isinstance(items, list) or len(items) != N_ITEMS:
                    got = len(items) if isinstance(items, list) else "none"
                    raise ParseError(f"line {lineno}: assess record needs {N_ITEMS} items, got {got}")
                try:
                    ev = AssessmentEvent(day, tuple(int(r) for r in items), int(rec["overall"]))
                except (KeyError, ValueError) as exc:
                    raise ParseError(f"line {lineno}: bad assess record ({exc})")
                except ValidationError as exc:
                    raise ParseError(f"line {lineno}: {exc}")
                tl.assessments.append(ev)
            else:
                raise ParseError(f"line {lineno}: unknown record kind {kind!r}")
    for p in patients.values():
        p.timeline.sort()
    ds = CohortDataset(list(patients.values()))
    validate_cohort(ds)
    return ds


def _load_archive(path) -> CohortDataset:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"line {exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict) or doc.get("magic") != ARCHIVE_MAGIC:
        raise ParseError(f"not a cohort archive (expected magic {ARCHIVE_MAGIC!r})")
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported schema_version {version!r} (this build reads version {SCHEMA_VERSION})"
        )
    patients = [
        _patient_from_obj(obj, f"patient #{i}") for i, obj in enumerate(doc.get("patients", []))
    ]
    for p in patients:
        p.timeline.sort()
    ds = CohortDataset(patients, schema_version=version)
    validate_cohort(ds)
    return ds


def load_cohort(path, format: str = "cohort-archive") -> CohortDataset:
    """Read a cohort file.  ``format`` is ``cohort-archive`` or ``event-lines``."""
    if format == "cohort-archive":
        return _load_archive(path)
    if format == "event-lines":
        return _load_event_lines(path)
    raise ConfigError(f"unknown cohort format {format!r}")


# ---------------------------------------------------------------------------
# splitting


def split_patients(dataset: CohortDataset, train_fraction: float, seed: int):
    """Patient-level split; a patient's rows never straddle the two sides.

    The train side receives ceil(n * train_fraction) patients.  Patient order
    within each side follows the input dataset.
    """
    if not (0.0 <= train_fraction <= 1.0):
        raise ConfigError(f"train_fraction {train_fraction} outside [0, 1]")
    n = len(dataset.patients)
    n_train = math.ceil(n * train_fraction)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    train_idx = set(perm[:n_train].tolist())
    train = [p for i, p in enumerate(dataset.patients) if i in train_idx]
    val = [p for i, p in enumerate(dataset.patients) if i not in train_idx]
    return (
        CohortDataset(train, schema_version=dataset.schema_version),
        CohortDataset(val, schema_version=dataset.schema_version),
    )


# ---------------------------------------------------------------------------
# synthetic generator

DEFAULT_PREVALENCES = {15: 0.040, 30: 0.071, 60: 0.103, 90: 0.131, 180: 0.186, 360: 0.240}

DEFAULT_DEMOGRAPHIC_MARGINALS = {
    "gender": {"female": 0.507, "male": 0.493},
    "age_band": {"under_21": 0.164, "21_35": 0.280, "36_50": 0.280, "51_65": 0.180, "over_65": 0.096},
    "marital_status": {"single": 0.544, "married": 0.200, "divorced_separated": 0.110, "other": 0.146},
    "occupation": {"unemployed_home_duties": 0.167, "pensioner_retired": 0.192, "other": 0.641},
    "language": {"english": 0.90, "other": 0.10},
    "country_of_birth": {"australia": 0.85, "other": 0.15},
    "religion": {"none": 0.40, "christian": 0.45, "other": 0.15},
    "indigenous_status": {"non_indigenous": 0.96, "indigenous": 0.03, "unknown": 0.01},
}

# P(k assessments) for k = 1..12; heavy single-assessment mass with a long tail.
DEFAULT_ASSESSMENT_COUNTS = (
    0.62, 0.17, 0.07, 0.04, 0.025, 0.015, 0.01, 0.01, 0.005, 0.005, 0.01, 0.02,
)

# Diagnosis channels: (3-char prefix, mean events per 48 observed months,
# loading on severity latent, loading on instability latent).  Channels with a
# zero loading pair are background noise.
_DIAG_CHANNELS = (
    ("F32", 1.6, 0.9, 0.0),
    ("F33", 1.1, 0.9, 0.0),
    ("F31", 0.7, 0.8, 0.0),
    ("F20", 0.6, 0.7, 0.0),
    ("F43", 1.2, 0.5, 0.2),
    ("F41", 1.0, 0.5, 0.0),
    ("F25", 0.4, 0.6, 0.3),
    ("F10", 1.3, 0.0, 0.9),
    ("F11", 0.8, 0.0, 0.9),
    ("F60", 0.7, 0.3, 0.7),
    ("I10", 1.0, 0.0, 0.0),
    ("E11", 0.8, 0.0, 0.0),
    ("J44", 0.5, 0.0, 0.0),
    ("M54", 1.1, 0.0, 0.0),
    ("J06", 0.9, 0.0, 0.0),
    ("R10", 0.7, 0.0, 0.0),
    ("Z00", 0.6, 0.0, 0.0),
    ("K74", 0.3, 0.0, 0.0),
    ("N18", 0.25, 0.0, 0.0),
    ("D64", 0.3, 0.0, 0.0),
    ("E66", 0.4, 0.0, 0.0),
    ("I50", 0.25, 0.0, 0.0),
)

INFORMATIVE_CODE_PREFIXES = tuple(
    prefix for prefix, _, l1, l2 in _DIAG_CHANNELS if l1 != 0.0 or l2 != 0.0
)

# Risky diagnosis prefixes used for planted outcome events; kept out of the
# background channels above so labels trace back to planted events only.
PLANTED_RISKY_PREFIXES = ("S51", "S11", "S61", "T39", "X60", "X78")

_HISTORY_DAYS = 48 * 30

# Planted outcome score: a documented nonlinear function of the two clinical
# latents.  The interaction and curvature terms dominate by design.
_W_SEV = 0.25
_W_INST = 0.20
_W_INTER = 1.00
_W_CURVE = 0.55


def _planted_score(sev, inst):
    return _W_SEV * sev + _W_INST * inst + _W_INTER * sev * inst + _W_CURVE * (sev * sev - 1.0)


@dataclass
class SyntheticConfig:
    n_patients: int = 7399
    prevalence_by_horizon: dict = field(default_factory=lambda: dict(DEFAULT_PREVALENCES))
    demographic_marginals: dict = field(
        default_factory=lambda: {k: dict(v) for k, v in DEFAULT_DEMOGRAPHIC_MARGINALS.items()}
    )
    assessment_count_distribution: tuple = DEFAULT_ASSESSMENT_COUNTS
    signal_strength: float = 0.8
    redundancy_factor: int = 0

    def validate(self):
        if int(self.n_patients) < 2:
            raise ConfigError(f"n_patients must be >= 2, got {self.n_patients}")
        horizons = sorted(self.prevalence_by_horizon)
        if not horizons:
            raise ConfigError("prevalence_by_horizon is empty")
        prev = [self.prevalence_by_horizon[h] for h in horizons]
        for h, p in zip(horizons, prev):
            if not (0.0 < p < 1.0):
                raise ConfigError(f"prevalence at horizon {h} must lie in (0, 1), got {p}")
        for a, b, ha, hb in zip(prev, prev[1:], horizons, horizons[1:]):
            if b < a:
                raise ConfigError(
                    f"prevalence must be non-decreasing in horizon: {ha}d={a} > {hb}d={b}"
                )
        if not (0.0 <= self.signal_strength <= 1.0):
            raise ConfigError(f"signal_strength must lie in [0, 1], got {self.signal_strength}")
        # cap keeps the U50.. copy prefixes within two digits (10 channels x 5)
        if not (0 <= int(self.redundancy_factor) <= 5):
            raise ConfigError(f"redundancy_factor must lie in 0..5, got {self.redundancy_factor}")
        for fld, marg in self.demographic_marginals.items():
            if fld not in DEMOGRAPHIC_VOCAB:
                raise ConfigError(f"unknown demographic field {fld!r}")
            bad = set(marg) - set(DEMOGRAPHIC_VOCAB[fld])
            if bad:
                raise ConfigError(f"unknown categories for {fld}: {sorted(bad)}")
            total = sum(marg.values())
            if abs(total - 1.0) > 1e-9:
                raise ConfigError(f"marginals for {fld} sum to {total}, expected 1")
        dist = np.asarray(self.assessment_count_distribution, dtype=float)
        if dist.size == 0 or (dist < 0).any() or abs(dist.sum() - 1.0) > 1e-9:
            raise ConfigError("assessment_count_distribution must be a probability vector")


def generate_synthetic_cohort(config: SyntheticConfig, seed: int) -> CohortDataset:
    """Build a cohort with planted, calibrated outcomes.

    Each patient gets two clinical latents (severity, instability) that drive
    diagnosis rates, postcode-change rates and assessment item ratings.  The
    planted risk score mixes a nonlinear function of the latents (see
    ``_planted_score``) with per-assessment noise at ``signal_strength``; the
    in-cohort mid-rank of that score is matched against the target prevalence
    ladder, and for each positive anchor one risky-prefix diagnosis is planted
    inside the corresponding horizon window.  Assessments of one patient are
    spaced more than the longest horizon apart, so windows never overlap and
    empirical prevalence equals the target to within 0.5/n_anchors.

    ``redundancy_factor`` adds that many noisy copies of EVERY informative
    code channel, each copy its own extra channel (``U50``, ``U51``, ...):
    every source event is duplicated with probability 0.75 under a +/-15 day
    jitter.

    Identical (config, seed) pairs yield bit-identical cohorts.
    """
    config.validate()
    rng = np.random.default_rng(int(seed))
    n = int(config.n_patients)
    horizons = sorted(config.prevalence_by_horizon)
    prev = np.array([config.prevalence_by_horizon[h] for h in horizons], dtype=float)
    max_h = max(horizons)

    sev = rng.standard_normal(n)
    inst = rng.standard_normal(n)

    demo_draws = {}
    for fld in DEMOGRAPHIC_FIELDS:
        marg = config.demographic_marginals.get(fld, DEFAULT_DEMOGRAPHIC_MARGINALS[fld])
        cats = [c for c in DEMOGRAPHIC_VOCAB[fld] if c in marg]
        probs = np.array([marg[c] for c in cats], dtype=float)
        probs = probs / probs.sum()
        demo_draws[fld] = rng.choice(len(cats), size=n, p=probs)
        demo_draws[fld] = [cats[i] for i in demo_draws[fld]]

    dist = np.asarray(config.assessment_count_distribution, dtype=float)
    n_assess = rng.choice(dist.size, size=n, p=dist / dist.sum()) + 1
    total_assess = int(n_assess.sum())

    # Gaps exceed the longest horizon so consecutive outcome windows of one
    # patient can never overlap.
    first_anchor = _HISTORY_DAYS + rng.integers(0, 181, size=n)
    min_gap = max_h + 1
    gaps = rng.integers(min_gap, min_gap + 120, size=max(total_assess - n, 0))

    anchors = []  # per patient list of anchor days
    gi = 0
    for i in range(n):
        days = [int(first_anchor[i])]
        for _ in range(int(n_assess[i]) - 1):
            days.append(days[-1] + int(gaps[gi]))
            gi += 1
        anchors.append(days)

    window_start = np.array([a[0] - _HISTORY_DAYS for a in anchors])
    window_end = np.array([a[-1] for a in anchors])
    wlen = (window_end - window_start + 1).astype(float)

    # Background diagnosis events per channel, Poisson with a mean-one
    # lognormal patient multiplier on the loaded latents.
    prefixes = [c[0] for c in _DIAG_CHANNELS]
    base = np.array([c[1] for c in _DIAG_CHANNELS])
    l1 = np.array([c[2] for c in _DIAG_CHANNELS])
    l2 = np.array([c[3] for c in _DIAG_CHANNELS])
    mult = np.exp(
        np.outer(sev, l1) + np.outer(inst, l2) - 0.5 * (l1 ** 2 + l2 ** 2)[None, :]
    )
    lam = base[None, :] * mult * (wlen / _HISTORY_DAYS)[:, None]
    diag_counts = rng.poisson(lam)

    total_events = int(diag_counts.sum())
    ev_patient = np.repeat(np.arange(n), diag_counts.sum(axis=1))
    ev_channel = np.concatenate(
        [np.repeat(np.arange(len(prefixes)), diag_counts[i]) for i in range(n)]
    ) if total_events else np.empty(0, dtype=int)
    ev_day = (
        window_start[ev_patient]
        + np.floor(rng.random(total_events) * wlen[ev_patient]).astype(int)
    ) if total_events else np.empty(0, dtype=int)
    ev_sub = rng.integers(0, 10, size=total_events)

    # Noisy-copy redundancy channels: redundancy_factor copies of EVERY
    # informative channel, each copy its own U-prefix.
    red_patient = []
    red_day = []
    red_prefix = []
    for j in range(int(config.redundancy_factor) * len(INFORMATIVE_CODE_PREFIXES)):
        src = INFORMATIVE_CODE_PREFIXES[j % len(INFORMATIVE_CODE_PREFIXES)]
        src_idx = prefixes.index(src)
        mask = ev_channel == src_idx
        keep = rng.random(int(mask.sum())) < 0.75
        jitter = rng.integers(-15, 16, size=int(mask.sum()))
        src_pat = ev_patient[mask][keep]
        src_day = ev_day[mask][keep] + jitter[keep]
        src_day = np.clip(src_day, window_start[src_pat], window_end[src_pat])
        red_patient.append(src_pat)
        red_day.append(src_day)
        red_prefix.extend([f"U{50 + j}"] * int(keep.sum()))
    red_patient = np.concatenate(red_patient) if red_patient else np.empty(0, dtype=int)
    red_day = np.concatenate(red_day) if red_day else np.empty(0, dtype=int)
    red_sub = rng.integers(0, 10, size=red_patient.size)

    # Postcode changes driven by the instability latent.
    lam_mv = 1.3 * np.exp(0.8 * inst - 0.32) * (wlen / _HISTORY_DAYS)
    mv_counts = rng.poisson(lam_mv)
    mv_patient = np.repeat(np.arange(n), mv_counts)
    mv_day = (
        window_start[mv_patient]
        + np.floor(rng.random(int(mv_counts.sum())) * wlen[mv_patient]).astype(int)
    ) if mv_counts.sum() else np.empty(0, dtype=int)

    # Planted outcome score per anchor.
    score = _planted_score(sev, inst)
    z = (score - score.mean()) / (score.std() + 1e-12)
    a_patient = np.repeat(np.arange(n), n_assess)
    gamma = float(config.signal_strength)
    eps = rng.standard_normal(total_assess)
    mixed = gamma * z[a_patient] + math.sqrt(max(0.0, 1.0 - gamma * gamma)) * eps

    order = np.argsort(-mixed, kind="stable")
    rank = np.empty(total_assess, dtype=int)
    rank[order] = np.arange(total_assess)
    rho = (rank + 0.5) / total_assess

    # Smallest horizon whose target prevalence covers this anchor's quantile.
    hit = np.full(total_assess, -1, dtype=int)
    for k in range(len(horizons) - 1, -1, -1):
        hit[rho <= prev[k]] = k

    anchor_day_flat = np.concatenate([np.array(a) for a in anchors])
    lo_h = np.where(hit > 0, np.array([0] + horizons)[hit], 0)
    hi_h = np.where(hit >= 0, np.array(horizons)[np.maximum(hit, 0)], 0)
    plant_u = rng.random(total_assess)
    plant_prefix_idx = rng.integers(0, len(PLANTED_RISKY_PREFIXES), size=total_assess)
    plant_sub = rng.integers(0, 10, size=total_assess)

    # Assessment item ratings: items 1-8 load on severity, 9-14 on
    # instability, 15-18 are noise.
    item_load = np.zeros((2, N_ITEMS))
    item_load[0, :8] = 0.95
    item_load[1, 8:14] = 0.95
    latents_flat = np.stack([sev[a_patient], inst[a_patient]], axis=1)
    item_noise = rng.standard_normal((total_assess, N_ITEMS))
    items = np.clip(
        np.rint(1.0 + latents_flat @ item_load + 0.75 * item_noise), 0, RATING_MAX
    ).astype(int)

    # Overall rating: a noisy clinician read of the realized risk state.
    overall_noise = rng.standard_normal(total_assess)
    overall = np.clip(
        np.rint(1.5 + 0.9 * (0.5 * mixed + 0.87 * overall_noise)), 0, RATING_MAX
    ).astype(int)

    # ev_patient and mv_patient are non-decreasing by construction; sort the
    # redundancy events once so each patient is a contiguous slice.
    ev_starts = np.searchsorted(ev_patient, np.arange(n + 1))
    mv_starts = np.searchsorted(mv_patient, np.arange(n + 1))
    red_order = np.argsort(red_patient, kind="stable")
    red_patient_s = red_patient[red_order]
    red_day_s = red_day[red_order]
    red_prefix_s = [red_prefix[k] for k in red_order]
    red_sub_s = red_sub[red_order]
    red_starts = np.searchsorted(red_patient_s, np.arange(n + 1))

    patients = []
    ai = 0
    width = max(6, len(str(n)))
    for i in range(n):
        demo = Demographics(**{f: demo_draws[f][i] for f in DEMOGRAPHIC_FIELDS})
        tl = EventTimeline()
        for k in range(ev_starts[i], ev_starts[i + 1]):
            tl.diagnoses.append((int(ev_day[k]), f"{prefixes[ev_channel[k]]}.{ev_sub[k]}"))
        for k in range(red_starts[i], red_starts[i + 1]):
            tl.diagnoses.append((int(red_day_s[k]), f"{red_prefix_s[k]}.{red_sub_s[k]}"))
        for k in range(mv_starts[i], mv_starts[i + 1]):
            tl.postcode_changes.append(int(mv_day[k]))
        for j, day in enumerate(anchors[i]):
            idx = ai + j
            tl.assessments.append(
                AssessmentEvent(day, tuple(items[idx].tolist()), int(overall[idx]))
            )
            if hit[idx] >= 0:
                lo = day + int(lo_h[idx]) + 1
                hi = day + int(hi_h[idx])
                plant_day = lo + int(plant_u[idx] * (hi - lo + 1))
                plant_day = min(plant_day, hi)
                code = f"{PLANTED_RISKY_PREFIXES[plant_prefix_idx[idx]]}.{plant_sub[idx]}"
                tl.diagnoses.append((plant_day, code))
        ai += len(anchors[i])
        tl.sort()
        patients.append(PatientRecord(f"p{i:0{width}d}", demo, tl))

    assert gi == gaps.size and ai == total_assess
    return CohortDataset(patients)
