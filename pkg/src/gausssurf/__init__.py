"""Surface-aligned Gaussian splatting on the CPU.

Regularize a Gaussian scene toward its surface, extract a triangle mesh from a
density level set, then bind flat Gaussians to that mesh and refine both.
"""
__version__ = "0.1.0"

from ._backend import BACKEND
from .density_field import NeighborIndex, density, ideal_density, ideal_sdf, rebuild_index
from .eval_metrics import MetricReport, chamfer_hausdorff, psnr, ssim
from .level_set import EmptyCloudError, LevelSetConfig, OrientedPointCloud, sample_level_set
from .mesh import TriangleMesh, icosphere, load_mesh, save_mesh
from .poisson_mesh import (decimate_qem, density_marching_cubes, extract_mesh, marching_cubes,
                           poisson_reconstruct)
from .regularizer import TrainConfig, Trainer, train
from .scene_io import (Camera, Gaussian3D, Scene, SyntheticSpec, load_cameras, load_gaussian_ply,
                       make_synthetic_scene, save_cameras, save_gaussian_ply)
from .splat_render import RenderSettings, backward_render, render_depth, render_image
from .surface_bind import BoundScene, RefineConfig, bind_gaussians, edit_rescale, refine

__all__ = [
    "BACKEND", "BoundScene", "Camera", "EmptyCloudError", "Gaussian3D", "LevelSetConfig",
    "MetricReport", "NeighborIndex", "OrientedPointCloud", "RefineConfig", "RenderSettings", "Scene",
    "SyntheticSpec", "TrainConfig", "Trainer", "TriangleMesh", "backward_render", "bind_gaussians",
    "chamfer_hausdorff", "decimate_qem", "density", "density_marching_cubes", "edit_rescale",
    "extract_mesh", "icosphere", "ideal_density", "ideal_sdf", "load_cameras", "load_gaussian_ply",
    "load_mesh", "make_synthetic_scene", "marching_cubes", "poisson_reconstruct", "psnr",
    "rebuild_index", "refine", "render_depth", "render_image", "sample_level_set", "save_cameras",
    "save_gaussian_ply", "save_mesh", "ssim", "train",
]
