"""Exception hierarchy shared by every module."""


class UNCDError(Exception):
    """Base class for all package errors."""


class DimensionError(UNCDError, ValueError):
    pass


class ConfigError(UNCDError, ValueError):
    pass


class ClassIndexError(UNCDError, ValueError):
    pass


class DegenerateInputError(UNCDError, ValueError):
    pass


class FormatError(UNCDError, ValueError):
    """Malformed or incompatible file (checkpoint, PNG, manifest)."""


class GenerationError(UNCDError, RuntimeError):
    pass


class UndefinedMetricError(UNCDError, ValueError):
    pass
