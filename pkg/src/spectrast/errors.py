"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: SpectrastError subclasses are user/config
problems (exit 1); InternalError signals a broken invariant (exit 2).
"""


class SpectrastError(Exception):
    """Base class for all user-facing errors."""


class ParseError(SpectrastError):
    """Malformed input file; carries the offending line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ShapeError(SpectrastError):
    """Array or spectrum dimensions do not conform."""


class ConfigError(SpectrastError):
    """Invalid configuration value or combination."""


class DomainError(SpectrastError):
    """Argument outside its mathematical domain."""


class UndefinedMetricError(SpectrastError):
    """Metric requested on an input for which it is undefined."""


class CheckpointError(SpectrastError):
    """Corrupt, truncated, or incompatible checkpoint file."""


class InternalError(Exception):
    """Broken internal invariant; indicates a bug, not a user error."""
