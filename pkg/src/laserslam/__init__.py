"""2D laser SLAM toolkit with a simulation benchmark.

Three pipelines share one occupancy-grid core: scan-to-map Gauss-Newton
matching (:mod:`.hector`), a Rao-Blackwellized particle filter (:mod:`.rbpf`)
and submaps with pose-graph loop closure (:mod:`.submap`). :mod:`.sim`
produces synthetic records, :mod:`.fusion` adds altitude, and
:mod:`.evaluation` scores trajectories.
"""

from .geom import Pose2, Pose3, Trajectory, between, compose, inverse, normalize_angle
from .gridmap import MapPyramid, OccupancyGrid, Submap, insert_scan, interpolate
from .hector import HectorSLAM
from .rbpf import RBPFSLAM
from .submap import SubmapSLAM

__version__ = "0.1.0"

__all__ = [
    "Pose2", "Pose3", "Trajectory", "between", "compose", "inverse", "normalize_angle",
    "MapPyramid", "OccupancyGrid", "Submap", "insert_scan", "interpolate",
    "HectorSLAM", "RBPFSLAM", "SubmapSLAM",
]
