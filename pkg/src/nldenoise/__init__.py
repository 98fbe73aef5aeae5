"""Nonlocal-means denoising with bilevel learning of its parameters.

The lower level solves a volume-constrained nonlocal diffusion-reaction
system whose kernel is built from image patches; the upper level learns the
fidelity weight (scalar or spatially varying) or the kernel decay weight by
minimising the reconstruction error against clean references, using
adjoint-based gradients inside a projected trust-region method.
"""

from .estimators import (
    KernelWeightDenoiser,
    NonlocalMeansDenoiser,
    ScalarFidelityDenoiser,
    SpatialFidelityDenoiser,
)
from .imaging import (
    Image,
    NoiseSpec,
    QualityReport,
    add_gaussian_noise,
    l2_loss,
    psnr,
    quality_report,
    read_image,
    ssim,
    textured_image,
    write_image,
)
from .kernel import (
    DissimilarityMatrix,
    KernelMatrix,
    PatchConfig,
    assemble_kernel,
    build_dissimilarity,
    default_interaction_radius,
    linearized_kernel,
    reweight,
)
from .optimizer import Box, TrustRegionConfig, minimize
from .solver import LowerLevelSystem, SolveReport, assemble_operator, solve_state

__version__ = "0.1.0"

__all__ = [
    "Image",
    "NoiseSpec",
    "QualityReport",
    "add_gaussian_noise",
    "ssim",
    "psnr",
    "l2_loss",
    "quality_report",
    "read_image",
    "write_image",
    "textured_image",
    "PatchConfig",
    "DissimilarityMatrix",
    "KernelMatrix",
    "build_dissimilarity",
    "assemble_kernel",
    "reweight",
    "linearized_kernel",
    "default_interaction_radius",
    "LowerLevelSystem",
    "SolveReport",
    "assemble_operator",
    "solve_state",
    "Box",
    "TrustRegionConfig",
    "minimize",
    "NonlocalMeansDenoiser",
    "ScalarFidelityDenoiser",
    "SpatialFidelityDenoiser",
    "KernelWeightDenoiser",
    "__version__",
]
