"""Zero-delay (consistent) spline reconstruction of streamed quantized time series."""

from streamspline.spline import (
    SplineEstimate,
    basis_vector,
    continuity_matrix,
    continuity_vector,
    enforce_continuity,
    roughness_matrix,
    roughness_numeric,
    roughness_quadratic,
    section_eval,
)
from streamspline.acquisition import (
    AcquisitionConfig,
    Dataset,
    Observation,
    Sequence,
    Var1Config,
    make_dataset,
    natural_cubic_interpolate,
    sample_and_quantize,
    var1_generate,
)
from streamspline.policy import (
    PolicySpec,
    ReconstructionState,
    Trajectory,
    consistency_check,
    evaluate_policy,
    hyperslab_project,
    reconstruct_stream,
)
from streamspline.batch import batch_solve

__version__ = "0.1.0"

__all__ = [
    "AcquisitionConfig",
    "Dataset",
    "Observation",
    "PolicySpec",
    "ReconstructionState",
    "Sequence",
    "SplineEstimate",
    "Trajectory",
    "Var1Config",
    "basis_vector",
    "batch_solve",
    "consistency_check",
    "continuity_matrix",
    "continuity_vector",
    "enforce_continuity",
    "evaluate_policy",
    "hyperslab_project",
    "make_dataset",
    "natural_cubic_interpolate",
    "reconstruct_stream",
    "roughness_matrix",
    "roughness_numeric",
    "roughness_quadratic",
    "sample_and_quantize",
    "section_eval",
    "var1_generate",
]
