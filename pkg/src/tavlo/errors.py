"""Exception and warning types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class TavloError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(TavloError, ValueError):
    """An operation received an argument violating its precondition."""


class ConfigError(TavloError, ValueError):
    """A configuration value violates a downstream module's precondition."""


class DataError(TavloError):
    """Manifest, media, or ground-truth data is missing or malformed."""


class NumericalError(TavloError):
    """A non-finite value surfaced where finite math was required."""


class TavloWarning(UserWarning):
    """Non-fatal conditions (empty results, skipped events, degenerate frames)."""
