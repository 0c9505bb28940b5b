"""Exception hierarchy shared by the library and the command line."""


class MaglocError(Exception):
    """Base class for all errors raised by magloc."""

    exit_code = 3


class InvalidInputError(MaglocError, ValueError):
    exit_code = 2


class InvalidRotationError(InvalidInputError):
    pass


class ConfigError(MaglocError, ValueError):
    exit_code = 2


class SingularityError(MaglocError, ValueError):
    """Field evaluated (numerically) on top of a point source."""


class MapFormatError(MaglocError):
    """Base class for map file decoding problems."""

    exit_code = 4
    code = "format"


class BadMagicError(MapFormatError):
    code = "bad-magic"


class VersionMismatchError(MapFormatError):
    code = "version"


class TruncatedMapError(MapFormatError):
    code = "truncated"


class EstimatorError(MaglocError):
    pass


class StepFailure(EstimatorError):
    """Every Monte-Carlo sample of a step was discarded."""
