"""Exception hierarchy. Each family maps to one CLI exit code."""


class NovelDecError(Exception):
    exit_code = 1


class ConfigError(NovelDecError, ValueError):
    exit_code = 2


class DataError(NovelDecError):
    exit_code = 3


class IngestionError(DataError):
    """A dataset file is missing or cannot be decoded."""


class ShapeError(NovelDecError, ValueError):
    exit_code = 3


class NumericError(NovelDecError, FloatingPointError):
    """Raised when a training step produces a non-finite loss.

    ``terms`` holds the per-term loss values at the failing step.
    """

    exit_code = 4

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})
