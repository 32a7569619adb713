"""Sparse ellipsoidal Gaussian RBF networks for signed distance fields.

The package fits a small set of anisotropic Gaussian kernels to precomputed
SDF samples, balancing approximation accuracy against basis-count sparsity,
and extracts the resulting implicit surface for inspection and scoring.
"""

from serbf.core import (
    ErbfBasis,
    ErbfModel,
    SampleSet,
    SURFACE_LAYER,
    denormalize_sdf,
    erbf_eval,
    model_eval,
    normalize_sdf,
    normalize_with,
    rotation_matrix,
)
from serbf.spatial import (
    GridSamples,
    OctreeGrid,
    ScreenIndex,
    build_octree,
    build_screen_index,
    neighbors_within,
    screening_radius,
)
from serbf.grad import (
    GradientBundle,
    LossWeights,
    dynamic_weights,
    grad_all,
    loss_l1,
    loss_l2,
    residuals,
    select_active,
)
from serbf.initialization import axis_length_init, inscribed_sphere_init
from serbf.optim import EpochRecord, TrainConfig, TrainingAbort, fit
from serbf.surface import (
    TriangleMesh,
    load_mesh,
    marching_cubes,
    read_obj,
    read_ply,
    sample_surface,
    write_obj,
)
from serbf.sdf import analytic_sdf, analytic_surface_samples, mesh_sdf
from serbf.metrics import MetricsReport, chamfer, cosine_similarity, hausdorff
from serbf.cli import (
    decode_model,
    encode_model,
    load_grid_samples,
    load_model,
    save_grid_samples,
    save_model,
)

__version__ = "0.1.0"

__all__ = [
    "EpochRecord",
    "ErbfBasis",
    "ErbfModel",
    "GradientBundle",
    "GridSamples",
    "LossWeights",
    "MetricsReport",
    "OctreeGrid",
    "SampleSet",
    "ScreenIndex",
    "SURFACE_LAYER",
    "TrainConfig",
    "TrainingAbort",
    "TriangleMesh",
    "analytic_sdf",
    "analytic_surface_samples",
    "axis_length_init",
    "build_octree",
    "build_screen_index",
    "chamfer",
    "cosine_similarity",
    "decode_model",
    "denormalize_sdf",
    "dynamic_weights",
    "encode_model",
    "erbf_eval",
    "fit",
    "grad_all",
    "hausdorff",
    "inscribed_sphere_init",
    "load_grid_samples",
    "load_mesh",
    "load_model",
    "loss_l1",
    "loss_l2",
    "marching_cubes",
    "mesh_sdf",
    "model_eval",
    "neighbors_within",
    "normalize_sdf",
    "normalize_with",
    "read_obj",
    "read_ply",
    "residuals",
    "rotation_matrix",
    "sample_surface",
    "save_grid_samples",
    "save_model",
    "screening_radius",
    "select_active",
    "write_obj",
]
