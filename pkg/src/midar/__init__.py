"""midar: occlusion-aware modeling of LiDAR detection outcomes (TP/FN)
for traffic simulators and trajectory datasets."""

from .geometry import OrientedBox, Pose2, Segment2, VehicleClass
from .rmlos import EgoState, FeatureStats, RMLoSGraph, SceneFrame
from .model import ModelParams, NodePrediction, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "OrientedBox", "Pose2", "Segment2", "VehicleClass",
    "EgoState", "FeatureStats", "RMLoSGraph", "SceneFrame",
    "ModelParams", "NodePrediction", "TrainConfig",
    "__version__",
]
