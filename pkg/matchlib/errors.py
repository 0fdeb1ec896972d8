class MatchlibError(Exception):
    pass


class DataError(MatchlibError, ValueError):
    """Invalid input data: malformed files, unknown users, out-of-range values."""


class ConfigError(DataError):
    pass


class GibbsStateError(MatchlibError, RuntimeError):
    pass


class UndefinedScoreError(MatchlibError, ValueError):
    """Raised when a gain ratio is requested for a feature with zero split information."""


class PlanViolationError(MatchlibError, RuntimeError):
    pass
