"""Exception hierarchy shared by the library and the CLI."""


class SlamError(Exception):
    """Base class for all surfel-slam failures."""

    exit_code = 1


class GeometryError(SlamError, ValueError):
    """Invalid camera, pose or pixel input."""

    exit_code = 2


class DataError(SlamError):
    """Missing or malformed input data."""

    exit_code = 2


class ConfigError(SlamError):
    """Unknown or invalid configuration value."""

    exit_code = 1


class TrackingError(SlamError):
    """Pose estimation could not proceed."""

    exit_code = 3
