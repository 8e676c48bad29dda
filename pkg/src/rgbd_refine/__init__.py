"""Joint refinement of camera poses, mesh geometry and texture from RGB-D scans."""
from .estimator import JointRefiner, check_model, check_scanset
from .losses import LossWeights
from .optimizer import OptimConfig, RefinementProblem, Schedule, StageConfig, joint_optimize, run_stage, run_strategy
from .render import HARD, SoftParams, rasterize
from .scene import Intrinsics, Pose, PoseDelta, RGBDFrame, ScanSet, TexturedModel, Texture, TriMesh
from .schedule import AdaptiveState, controller_step

__all__ = [
    "AdaptiveState", "HARD", "Intrinsics", "JointRefiner", "LossWeights", "OptimConfig", "Pose", "PoseDelta",
    "RGBDFrame", "RefinementProblem", "ScanSet", "Schedule", "SoftParams", "StageConfig", "Texture",
    "TexturedModel", "TriMesh", "check_model", "check_scanset", "controller_step", "joint_optimize", "rasterize",
    "run_stage", "run_strategy",
]
__version__ = "0.1.0"
