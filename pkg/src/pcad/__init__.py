"""Open-set supervised point-cloud anomaly detection with dual FPFH memory banks."""

import pcad._threads  # noqa: F401
from pcad.config import RunConfig
from pcad.geom import LabeledCloud, SpatialIndex, build_spatial_index, load_cloud

__all__ = ["LabeledCloud", "RunConfig", "SpatialIndex", "build_spatial_index", "load_cloud"]
__version__ = "0.1.0"
