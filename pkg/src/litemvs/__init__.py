"""Desk-scale multi-view stereo with correlation cost volumes.

Pipeline: shared-weight deep features, averaged group-wise-correlation cost
volume over inverse-depth hypotheses, cascade 3D filtering, sub-ordinal depth
regression, and consistency-checked fusion into point clouds.
"""

from .config import FusionConfig, NetworkConfig, VariantSpec, VARIANTS
from .geometry import (
    CameraView,
    DepthHypothesisSet,
    UniformDepthHypothesisSet,
    ValidationError,
    depth_to_ordinal,
    ordinal_to_depth,
    project,
    relative_pose,
    sample_inverse_depths,
    sample_uniform_depths,
)
from .network import CostFilterNet, DepthNetwork, depth_loss, regress
from .tensor import NumericError, ShapeError, Tensor, no_grad

__all__ = [
    "CameraView",
    "CostFilterNet",
    "DepthHypothesisSet",
    "DepthNetwork",
    "FusionConfig",
    "NetworkConfig",
    "NumericError",
    "ShapeError",
    "Tensor",
    "UniformDepthHypothesisSet",
    "ValidationError",
    "VariantSpec",
    "VARIANTS",
    "depth_loss",
    "depth_to_ordinal",
    "no_grad",
    "ordinal_to_depth",
    "project",
    "regress",
    "relative_pose",
    "sample_inverse_depths",
    "sample_uniform_depths",
]

__version__ = "0.1.0"
