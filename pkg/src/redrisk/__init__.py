"""Risk-of-adverse-event prediction over patient event timelines.

Cohort generation and IO, anchor-relative temporal featurization, five
classifier families trained from scratch on numpy, and the evaluation
protocol that sweeps (model x feature set x horizon).
"""

__version__ = "0.1.0"

from .cohort import (
    CohortDataset,
    SyntheticConfig,
    generate_synthetic_cohort,
    load_cohort,
    save_cohort,
    split_patients,
    validate_cohort,
)
from .errors import (
    ConfigError,
    DataError,
    ExperimentError,
    ParseError,
    RedriskError,
    ValidationError,
)
from .eval import ExperimentConfig, MetricReport, auc_mann_whitney, confusion_metrics, run_experiment
from .featurize import build_feature_matrix, filter_rare_features, label_outcomes

__all__ = [
    "__version__",
    "CohortDataset",
    "SyntheticConfig",
    "generate_synthetic_cohort",
    "load_cohort",
    "save_cohort",
    "split_patients",
    "validate_cohort",
    "ConfigError",
    "DataError",
    "ExperimentError",
    "ParseError",
    "RedriskError",
    "ValidationError",
    "ExperimentConfig",
    "MetricReport",
    "auc_mann_whitney",
    "confusion_metrics",
    "run_experiment",
    "build_feature_matrix",
    "filter_rare_features",
    "label_outcomes",
]
