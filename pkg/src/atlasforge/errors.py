"""Exception hierarchy shared by every module.

The CLI maps each family onto a distinct exit status, so library code
should raise the narrowest class that applies.
"""


class AtlasForgeError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class ConfigError(AtlasForgeError, ValueError):
    """Invalid parameters, manifests or command-line arguments."""

    exit_code = 2


class FormatError(AtlasForgeError):
    """Unreadable, malformed or inconsistent files."""

    exit_code = 3


class GeometryError(AtlasForgeError, ValueError):
    """Rasters or fields whose geometry does not line up."""

    exit_code = 2


class NumericError(AtlasForgeError, ArithmeticError):
    """Non-finite values, degenerate statistics, empty masks."""

    exit_code = 4


class RegistrationError(NumericError):
    """A registration did not produce a usable transform."""
