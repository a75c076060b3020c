"""Hierarchical spatiotemporal deformation fitting for 3D point tracks.

The library fits a blended rigid deformation field (motion bases on a KNN
scaffold, dual quaternion blending) to observed trajectories, refines it
over a binary partition tree of frame intervals optimized layer by layer,
and assembles predictions per node from its own state plus specialized
copies of its ancestors.
"""

from .config import RunConfig
from .geometry import DualQuaternion, Quaternion, SE3Transform, dqb_blend
from .optimize import LossWeights, OptimConfig, schedule_cost
from .scaffold import MotionBasis, ScaffoldGraph, ScenePoint
from .scene import EvalReport, SyntheticSpec, Track, TrackSet
from .tree import AncestorCopy, PartitionTree, TimeInterval, TreeNode

__version__ = "0.1.0"

__all__ = [
    "AncestorCopy",
    "DualQuaternion",
    "EvalReport",
    "LossWeights",
    "MotionBasis",
    "OptimConfig",
    "PartitionTree",
    "Quaternion",
    "RunConfig",
    "SE3Transform",
    "ScaffoldGraph",
    "ScenePoint",
    "SyntheticSpec",
    "TimeInterval",
    "Track",
    "TrackSet",
    "TreeNode",
    "dqb_blend",
    "schedule_cost",
    "__version__",
]
