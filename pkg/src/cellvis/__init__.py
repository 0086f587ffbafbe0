"""Cell-level visibility and viewport prediction for point cloud video.

Subpackages and modules:

- ``pc_io``: PLY frames, trajectories, voxel resampling, synthetic scenes
- ``camera``: 6DoF poses, pinhole projection, frustum tests, angle encoding
- ``hull`` / ``hpr``: convex hull and hidden point removal
- ``cellgrid``: cell partition, grid graph and per-cell features
- ``autograd``: small reverse-mode tensor engine with Adam
- ``model``: graph-attention + bidirectional GRU predictor
- ``baselines``: LR, TLR, M-MLP and M-LSTM pose extrapolation
- ``evaluation``: windows, splits, metrics and reports
- ``cli``: the ``cellvis`` command
"""
from .baselines import LinearPoseRegressor, MLSTMRegressor, MMLPRegressor, pose_to_features
from .camera import CameraIntrinsics, Pose6DoF
from .cellgrid import CHANNELS, CellFeatureExtractor, CellGrid, build_graph, build_grid
from .hpr import HprParams, hpr_visible
from .model import CellVisibilityPredictor

__version__ = "0.1.0"

__all__ = [
    "CHANNELS",
    "CameraIntrinsics",
    "CellFeatureExtractor",
    "CellGrid",
    "CellVisibilityPredictor",
    "HprParams",
    "LinearPoseRegressor",
    "MLSTMRegressor",
    "MMLPRegressor",
    "Pose6DoF",
    "build_graph",
    "build_grid",
    "hpr_visible",
    "pose_to_features",
]
