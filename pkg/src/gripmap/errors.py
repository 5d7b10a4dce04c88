"""Exception types shared across the package."""


class GripmapError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(GripmapError, ValueError):
    """Invalid or missing configuration value."""


class TimestampRangeError(GripmapError, ValueError):
    """A queried timestamp falls outside the trajectory span."""


class GeometryError(GripmapError, ValueError):
    """Degenerate geometric configuration (e.g. plane seen edge-on)."""


class FormatError(GripmapError, ValueError):
    """Malformed, truncated, or inconsistent on-disk data."""


class DegenerateStatisticsError(GripmapError, ValueError):
    """A normalization region has (near-)zero variance."""


class DegenerateWeightsError(GripmapError, ValueError):
    """All raw label weights in a frame are zero."""


class InputError(GripmapError, ValueError):
    """Model inputs do not match the configured modality set or shapes."""


class TrainingDivergedError(GripmapError, RuntimeError):
    """Training produced a non-finite loss."""
