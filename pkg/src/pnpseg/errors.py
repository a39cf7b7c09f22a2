"""Exception types raised across the package."""


class PnPError(Exception):
    """Base class; ``kind`` is used for the CLI's machine-readable errors."""

    kind = "error"


class ConfigurationError(PnPError, ValueError):
    kind = "configuration"


class DimensionError(PnPError, ValueError):
    kind = "dimension"


class ArgumentError(PnPError, ValueError):
    kind = "argument"


class FormatError(PnPError, ValueError):
    kind = "format"


class DegenerateInputError(PnPError, ValueError):
    kind = "degenerate-input"


class DependencyError(PnPError, FileNotFoundError):
    kind = "dependency"


class TapLookupError(PnPError, KeyError):
    kind = "lookup"

    def __str__(self):
        return Exception.__str__(self)


class TargetLabelAccessError(PnPError, RuntimeError):
    """Raised when code touches target-domain labels during adaptation."""

    kind = "target-label-access"
