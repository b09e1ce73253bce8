"""Exception hierarchy shared across modules."""


class IsoTurnoverError(Exception):
    """Base class for package errors."""


class InputError(IsoTurnoverError, ValueError):
    """Invalid arguments: dimension mismatch, bad level, out-of-range parameter."""


class UndefinedResultError(IsoTurnoverError):
    """A statistic is undefined for the supplied data (e.g. an empty group)."""


class CalibrationError(IsoTurnoverError):
    """Scale calibration cannot reach the requested superlevel mass."""

    def __init__(self, message, max_mass=None):
        super().__init__(message)
        self.max_mass = max_mass


class DataError(IsoTurnoverError):
    """Dataset rows failed validation; ``issues`` holds (row, column, value) triples."""

    def __init__(self, message, issues=()):
        super().__init__(message)
        self.issues = list(issues)


class ConfigError(IsoTurnoverError):
    """Run configuration is malformed or references missing inputs."""
