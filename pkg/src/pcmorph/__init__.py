"""Learned, topology-preserving interpolation between 3-D point clouds."""

from .geom import NeighborGraph, NormTransform, PointCloud, TriMesh
from .model import ModelConfig, Trajectory
from .train import TrainConfig

__version__ = "0.1.0"

__all__ = ["NeighborGraph", "NormTransform", "PointCloud", "TriMesh", "ModelConfig",
           "Trajectory", "TrainConfig"]
