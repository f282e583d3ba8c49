"""Skeleton action recognition with a training-time feature refinement head."""

from .backbone import Backbone, BackboneConfig, build_backbone
from .head import FRHead, FRHeadConfig
from .skeleton import SkeletonDataset, SkeletonTopology, SyntheticConfig, generate_synthetic
from .trainer import TrainConfig, evaluate, train

__all__ = [
    "Backbone",
    "BackboneConfig",
    "build_backbone",
    "FRHead",
    "FRHeadConfig",
    "SkeletonDataset",
    "SkeletonTopology",
    "SyntheticConfig",
    "generate_synthetic",
    "TrainConfig",
    "evaluate",
    "train",
]
