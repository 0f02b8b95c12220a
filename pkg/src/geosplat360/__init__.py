"""Panoramic Gaussian splatting with depth-normal regularization.

Equirectangular cameras, flattened 3D Gaussians rendered by
intersection-depth compositing, a training objective with a depth-normal
consistency term, a per-scene Adam fitter, a spherical plane-sweep depth
prior, and evaluation metrics.
"""

import warnings

# numba probes for TBB when a parallel kernel first runs and warns if the
# installed version is too old; it then falls back to another threading layer
warnings.filterwarnings("ignore", message=r"The TBB threading layer requires TBB")

from ._validation import DivergenceError, DomainError, NotFittedError  # noqa: E402
from .adapter import GaussianAdapter, RawPlanes, activate  # noqa: E402
from .camera import EquirectCamera, Ray, pixel_to_ray, ray_to_pixel, unproject  # noqa: E402
from .costvol import (  # noqa: E402
    DepthPrior,
    PlaneSweepDepth,
    SphereCostVolume,
    film_modulate,
    regress_depth,
    sweep,
)
from .gaussians import (  # noqa: E402
    GaussianPrimitive,
    GaussianScene,
    OrientedDisc,
    build_covariance,
    flatten,
    gaussian_normal,
)
from .losses import LossReport, LossWeights, dnormal_loss, scale_loss, total_loss  # noqa: E402
from .metrics import cloud_metrics, depth_metrics, psnr, ssim  # noqa: E402
from .optimizer import FitConfig, GaussianSceneFitter, fit, init_from_depth  # noqa: E402
from .panorama import PanoramaBuffer  # noqa: E402
from .render import RenderOptions, depth_to_normal, intersection_depth, render  # noqa: E402
from .synth import BoxRoom, render_gt, roomA, sample_surface  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "BoxRoom", "DepthPrior", "DivergenceError", "DomainError", "EquirectCamera", "FitConfig",
    "GaussianAdapter", "GaussianPrimitive", "GaussianScene", "GaussianSceneFitter", "LossReport",
    "LossWeights", "NotFittedError", "OrientedDisc", "PanoramaBuffer", "PlaneSweepDepth",
    "RawPlanes", "Ray", "RenderOptions", "SphereCostVolume", "activate", "build_covariance",
    "cloud_metrics", "depth_metrics", "depth_to_normal", "dnormal_loss", "film_modulate", "fit",
    "flatten", "gaussian_normal", "init_from_depth", "intersection_depth", "pixel_to_ray", "psnr",
    "ray_to_pixel", "regress_depth", "render", "render_gt", "roomA", "sample_surface",
    "scale_loss", "ssim", "sweep", "total_loss", "unproject",
]
