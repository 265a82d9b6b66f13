"""Exception hierarchy shared by every module."""


class ZsdError(Exception):
    """Base class for all package errors."""


class ShapeError(ZsdError, ValueError):
    pass


class DegenerateRowError(ZsdError, ValueError):
    """A row had (near) zero norm and cannot be normalized."""


class ConfigError(ZsdError, ValueError):
    pass


class ModelError(ZsdError, ValueError):
    pass


class OptimizerError(ZsdError, ValueError):
    pass


class ScheduleError(ZsdError, ValueError):
    pass


class ShardError(ZsdError, ValueError):
    pass


class CheckpointError(ZsdError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


class FormatError(ZsdError):
    """Bad magic, version or dtype in an EMB1 blob."""


class TruncationError(FormatError):
    """Header promises more payload than the file holds."""


class GenerationError(ZsdError, ValueError):
    pass


class LabelIndexError(ZsdError, ValueError):
    """Label index construction failure (duplicate labels, bad shapes)."""


class QueryError(ZsdError, ValueError):
    pass


class MetricError(ZsdError, ValueError):
    pass


class InputError(ZsdError, ValueError):
    pass
