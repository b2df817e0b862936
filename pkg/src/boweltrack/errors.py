"""Exception hierarchy shared across the package.

Exit codes used by the CLI: 0 success, 2 config error, 3 data error,
4 numeric failure.
"""


class ToolError(Exception):
    exit_code = 1


class ConfigError(ToolError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class PackingError(ConfigError):
    """A phantom centerline could not be packed into the requested grid."""


class DataError(ToolError):
    """Missing, malformed, or mismatched input data."""

    exit_code = 3


class VolumeFormatError(DataError):
    """A volume file violates the documented on-disk format."""


class NumericError(ToolError):
    """Non-finite values or other numeric failures during computation."""

    exit_code = 4
