"""3D multi-object tracking with interaction-aware learned affinities.

The package covers the full loop: synthetic scenario generation, affinity
network training with exact manual gradients, a two-stage tracking pipeline
with duplicate-track rejection, and a tracking-metric suite (AMOTA/AMOTP,
CLEAR-MOT, HOTA, feature-discrimination analysis).
"""

__version__ = "0.1.0"

from .core import (Detection, ObjectState, PointCloud, Track, TrackStatus,
                   TrackerConfig, TrainConfig, normalize_angle)
from .geometry import Box2D, CameraModel, iou_2d, iou_3d, project_box
from .interaction import AffinityModel
from .tracker import Tracker, run_sequence

__all__ = [
    "AffinityModel", "Box2D", "CameraModel", "Detection", "ObjectState",
    "PointCloud", "Track", "TrackStatus", "Tracker", "TrackerConfig",
    "TrainConfig", "iou_2d", "iou_3d", "normalize_angle", "project_box",
    "run_sequence", "__version__",
]
