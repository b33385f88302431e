"""Exception hierarchy. The CLI maps these onto exit codes."""


class GsmError(Exception):
    """Base class for every error raised deliberately by this package."""


class DimensionError(GsmError, ValueError):
    """Array shapes do not agree."""


class ConfigError(GsmError, ValueError):
    """Invalid run configuration (unknown key, bad value, Q > |Theta|, ...)."""


class FormatError(GsmError, ValueError):
    """A file does not have the expected binary or textual layout."""


class ConsistencyError(GsmError, ValueError):
    """Two pieces of data that must agree do not (e.g. image vs label count)."""


class CorruptionError(FormatError):
    """Checkpoint header and payload disagree."""


class VersionError(FormatError):
    """Checkpoint was written by an incompatible format version."""


class NumericalError(GsmError, ArithmeticError):
    """Training produced a non-finite loss."""
