"""Exception types shared across the package."""


class SusLabError(Exception):
    """Base class for all package errors."""


class DimensionError(SusLabError, ValueError):
    """Raised when array shapes do not fit the 2:4 layout or each other."""


class InvariantError(SusLabError, ValueError):
    """Raised when a structure violates its invariant (e.g. a mask that is not 2:4)."""


class ConfigError(SusLabError):
    """Invalid or incomplete run configuration.

    ``field`` carries the dotted path of the offending entry, e.g. ``attack.variant``.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
