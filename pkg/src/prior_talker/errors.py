"""Exception hierarchy. Each family maps onto a CLI exit code."""


class PriorTalkerError(Exception):
    exit_code = 1


class ConfigError(PriorTalkerError):
    """Bad configuration, missing or corrupt checkpoint."""

    exit_code = 2


class CheckpointError(ConfigError):
    pass


class DataError(PriorTalkerError):
    exit_code = 3


class ContractError(DataError, ValueError):
    """Shapes or dimensions do not line up."""


class RangeError(ContractError):
    pass


class UsageError(DataError, ValueError):
    """Arguments are well-typed but not meaningful (empty input, bad k, ...)."""


class DetectionError(DataError):
    pass


class ResolutionError(DataError):
    pass


class MediaReadError(DataError, OSError):
    pass


class NumericError(PriorTalkerError, ArithmeticError):
    exit_code = 4


class SingularityError(NumericError, ZeroDivisionError):
    pass


class CapabilityError(PriorTalkerError):
    """An optional injected component (e.g. a sync scorer) is unavailable."""
