"""Exception hierarchy shared across the package.

ConfigError covers anything wrong with user-supplied configuration,
arguments, or persisted file formats (CLI exit code 1). NumericalError
covers runtime numerical failures (CLI exit code 2). MetricError marks
metrics that are undefined for the given inputs.
"""


class WisteriaError(Exception):
    """Base class for all package errors."""


class ConfigError(WisteriaError):
    """Invalid configuration, arguments, or persisted file format."""


class NumericalError(WisteriaError):
    """A computation produced non-finite or otherwise unusable values."""


class MetricError(WisteriaError):
    """A metric is undefined for the given inputs (e.g. single-class AUROC)."""
