"""Exception types shared across the package."""


class C2farError(Exception):
    """Base class for all package errors."""


class ConfigurationError(C2farError, ValueError):
    """Invalid static configuration (binning, model, schedule, search space)."""


class InputError(C2farError, ValueError):
    """Invalid runtime input (values, paths, windows, file contents)."""


class NormalizationError(InputError):
    """A window cannot be min-max normalized (constant conditioning range)."""


class MetricError(InputError):
    """A metric is undefined for its inputs (e.g. zero denominator)."""


class DivergenceError(C2farError, RuntimeError):
    """Training produced a non-finite loss."""


class StudyError(C2farError, RuntimeError):
    """A tuning study produced no usable trial."""
