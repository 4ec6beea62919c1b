"""Exception types shared across the package."""


class SugarError(Exception):
    """Base class for all package errors."""


class ContractViolationError(SugarError):
    """An argument violates a documented precondition (shape, range, index)."""


class ConfigurationError(SugarError):
    """A configuration value is outside its documented range."""


class TrainingDivergenceError(SugarError):
    """A training loop produced a non-finite loss or gradient.

    ``context`` identifies where training stood when divergence was detected
    (e.g. the outer iteration of the constrained structural fit).
    """

    def __init__(self, message, context=None):
        super().__init__(message if context is None else f"{message} ({context})")
        self.context = context


class DegenerateVarianceError(SugarError):
    """A standardized statistic has zero standard error but nonzero mean."""


class DataFormatError(SugarError):
    """An input file failed to parse; ``line`` is the 1-based offending line."""

    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line
