"""Equivariant graph implicit functions for 3D occupancy reconstruction."""
from .geometry import SimilarityTransform
from .implicitnet import MODES, ModelConfig, ModelParameters, init_params, model_forward
from .recon import chamfer_l1, eval_reconstruction, evaluate_grid, marching_cubes, volumetric_iou
from .training import TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "MODES",
    "ModelConfig",
    "ModelParameters",
    "SimilarityTransform",
    "TrainingConfig",
    "chamfer_l1",
    "eval_reconstruction",
    "evaluate_grid",
    "init_params",
    "marching_cubes",
    "model_forward",
    "train",
    "volumetric_iou",
]
