"""RGB-D SLAM on a map of 2D Gaussian surfels with analytic gradients."""

from .config import SlamConfig, load_config
from .core_geometry import Intrinsics, Pose
from .errors import ConfigError, DataError, GeometryError, SlamError, TrackingError
from .pipeline import finalize, process_frame, run_sequence
from .rasterizer import DepthMode, RenderConfig, render
from .surfel_map import SurfelMap

__version__ = "0.1.0"
