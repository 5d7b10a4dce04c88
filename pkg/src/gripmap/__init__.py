"""Dense road-surface grip prediction from fused camera / thermal / LiDAR data.

Submodules are imported on demand; ``gripmap.model`` and ``gripmap.training``
pull in torch, the rest only need numpy / scipy / matplotlib.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    ConfigError,
    DegenerateStatisticsError,
    DegenerateWeightsError,
    FormatError,
    GeometryError,
    GripmapError,
    InputError,
    TimestampRangeError,
    TrainingDivergedError,
)
