"""Scene-aware monocular human trajectory optimisation.

Recovers global body trajectories and absolute body scale from 2D keypoints
and a scene point cloud, guided by dense body/scene contacts and a latent
pose manifold with hard collision rejection.
"""

from ._kernels import BACKEND as KERNEL_BACKEND
from .contacts import ContactLabels, annotate_trajectory, load_labels, save_labels
from .kinematics import (
    CameraIntrinsics,
    KinematicState,
    PointBehindCamera,
    SkeletonTemplate,
    body_surface,
    forward_kinematics,
    inside_body_count,
    project,
)
from .manifold import PoseManifold, fit_manifold, sample_poses, sample_poses_naive, sample_root
from .objective import LossWeights, Observation2D, load_observations, save_observations
from .optim import OptimizerConfig
from .pipeline import PipelineInputs, StageConfig, TrajectoryResult, load_states, run_pipeline, save_states
from .scene import FrustumGrid, SceneFormatError, SceneIndex, ScenePointCloud, frustum_normalize, voxelize

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "ContactLabels",
    "annotate_trajectory",
    "load_labels",
    "save_labels",
    "CameraIntrinsics",
    "KinematicState",
    "PointBehindCamera",
    "SkeletonTemplate",
    "body_surface",
    "forward_kinematics",
    "inside_body_count",
    "project",
    "PoseManifold",
    "fit_manifold",
    "sample_poses",
    "sample_poses_naive",
    "sample_root",
    "LossWeights",
    "Observation2D",
    "load_observations",
    "save_observations",
    "OptimizerConfig",
    "PipelineInputs",
    "StageConfig",
    "TrajectoryResult",
    "load_states",
    "run_pipeline",
    "save_states",
    "FrustumGrid",
    "SceneFormatError",
    "SceneIndex",
    "ScenePointCloud",
    "frustum_normalize",
    "voxelize",
]
