"""Exception taxonomy shared across the package.

ConfigError maps to CLI exit code 2, DataError (and subclasses) to exit code 3.
"""


class RedriskError(Exception):
    """Base class for package errors."""


class ConfigError(RedriskError):
    """Invalid configuration value, key, or file."""


class DataError(RedriskError):
    """Problem with cohort or feature data."""


class ParseError(DataError):
    """Malformed record in an input file; message carries the line number."""


class ValidationError(DataError):
    """Structurally parseable input that violates a dataset invariant."""


class ExperimentError(RedriskError):
    """Failure inside the evaluation protocol, tagged with the failing cell."""
