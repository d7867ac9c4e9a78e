"""Semantic-aware 4D reconstruction at toy scale: pointmaps, semantic anchoring,
cross-attention fusion, residual diffusion refinement and a synthetic scene harness."""

from __future__ import annotations

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .geometry import (  # noqa: F401
    CameraModel,
    MetricReport,
    Pointmap,
    Pose,
    TrajectorySet,
    apd,
    chamfer_distance,
    project,
    read_ply,
    write_ply,
)
from .semantic import FeatureMap, SemanticLossConfig, semantic_consistency_loss, synth_features  # noqa: F401
from .fusion import AdapterParams, fuse, fuse_backward  # noqa: F401
from .predictor import PairPrediction, PredictorParams, forward_pair, solve_pnp  # noqa: F401
from .diffusion import DiffusionSchedule, Residual, refine  # noqa: F401
from .scene import SceneConfig, SceneSample, generate, load_scene, sample_window, save_scene  # noqa: F401
from .training import LossWeights, ModelParams, OptimState, TrainConfig, adamw_step, evaluate, total_loss, train  # noqa: F401
