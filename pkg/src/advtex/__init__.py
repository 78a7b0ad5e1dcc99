"""Adversarial texture optimization for misaligned multi-view scans."""

__version__ = "0.1.0"

from .discriminator import PatchDiscriminator, receptive_field_mask
from .estimator import AdversarialTextureOptimizer, check_views
from .geometry import Camera, TriMesh, ViewSample, project, reproject_view, unproject
from .metrics import evaluate, exact_patch_loss, gradient_intensity, nearest_patch_loss
from .optim import OptimConfig, lambda_schedule, optimize_texture
from .raster import rasterize_mesh
from .render import TextureState, render_texture

__all__ = [
    "AdversarialTextureOptimizer", "Camera", "OptimConfig", "PatchDiscriminator", "TextureState", "TriMesh",
    "ViewSample", "check_views", "evaluate", "exact_patch_loss", "gradient_intensity", "lambda_schedule",
    "nearest_patch_loss", "optimize_texture", "project", "rasterize_mesh", "render_texture",
    "receptive_field_mask", "reproject_view", "unproject",
]
