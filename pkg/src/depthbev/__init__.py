"""Depth-modulated LiDAR-camera BEV feature fusion, desk scale.

A dependency-light implementation of depth-aware hybrid fusion: a depth
matrix with sinusoidal encoding drives both a global BEV cross-attention
block and a per-instance local fusion block, on top of a small tape-based
autodiff core and verifiable geometry kernels.
"""

__version__ = "0.1.0"

from .config import RunConfig, default_config, paper_shape_config
from .depth import (DepthEncoding, DepthMatrix, GridSpec, build_depth_matrix, depth_lookup,
                    encode_depths, instance_depth, positional_encoding_2d, sinusoidal_encode)
from .errors import (BoundsError, ConfigError, DepthBevError, DimensionError, NumericError,
                     StageError, UsageError, ValidationError)
from .geometry import (BevFeatureMap, Box3D, CameraModel, PointCloud, Rect, VoxelGrid,
                       VoxelGridConfig, crop_bev_box, height_compress, lift_splat,
                       project_box_to_image, roi_align, voxel_pool_box, voxelize)
from .global_fusion import GlobalFusionBlock
from .local_fusion import LocalFeatureSet, LocalFusionBlock, merge_global, select_locals
from .pipeline import FusionModel, build_corpus, run_pipeline
from .scenes import (CorruptionSpec, DensityModel, Scene, SceneSpec, compute_depth_stats,
                     default_density_model, generate_scene, inject_corruption)
from .tensor import GradTape, Tensor, finite_diff_grad
from .training import eval_loss, train_toy

__all__ = [
    "__version__",
    "RunConfig", "default_config", "paper_shape_config",
    "DepthEncoding", "DepthMatrix", "GridSpec", "build_depth_matrix", "depth_lookup",
    "encode_depths", "instance_depth", "positional_encoding_2d", "sinusoidal_encode",
    "BoundsError", "ConfigError", "DepthBevError", "DimensionError", "NumericError",
    "StageError", "UsageError", "ValidationError",
    "BevFeatureMap", "Box3D", "CameraModel", "PointCloud", "Rect", "VoxelGrid",
    "VoxelGridConfig", "crop_bev_box", "height_compress", "lift_splat",
    "project_box_to_image", "roi_align", "voxel_pool_box", "voxelize",
    "GlobalFusionBlock", "LocalFeatureSet", "LocalFusionBlock", "merge_global",
    "select_locals", "FusionModel", "build_corpus", "run_pipeline",
    "CorruptionSpec", "DensityModel", "Scene", "SceneSpec", "compute_depth_stats",
    "default_density_model", "generate_scene", "inject_corruption",
    "GradTape", "Tensor", "finite_diff_grad",
    "eval_loss", "train_toy",
]
