"""vesseltomo: parallel-beam projection, artifact-suppressed reconstruction,
and vessel segmentation on voxel volumes.

The public surface is re-exported flat; submodules stay importable for the
internals.
"""

from .volume import (
    Volume,
    VolumeFormatError,
    VolumeKind,
    apply_mask,
    load_volume,
    resample,
    save_volume,
)
from .geometry import (
    MemoryBudgetError,
    ProjectionGeometry,
    Ray,
    SystemMatrix,
    adjoint_apply,
    build_system_matrix,
    forward_apply,
    make_geometry,
    ray_for_pixel,
    trace_ray,
)
from .projection import (
    ProjectionStack,
    StackFormatError,
    TopKStack,
    beer_lambert_form,
    export_image,
    integral_projection,
    load_stack,
    save_stack,
    topk_mip,
)
from .reconstruction import (
    DivergenceError,
    FbpConfig,
    OptimizerConfig,
    OptimizerTrace,
    fbp,
    filter_stack,
    reconstruct_pipeline,
    suppress_artifacts,
)
from .postprocess import (
    SegmentationConfig,
    connected_components,
    export_component_table,
    percentile_threshold,
    remove_small_components,
    scaled_min_size,
    segment,
)
from .metrics import (
    ImageQualityReport,
    SegmentationReport,
    cl_dice,
    image_quality,
    psnr,
    segmentation_metrics,
    skeletonize,
    ssim,
)
from .phantom import (
    CenterlineGraph,
    PhantomConfig,
    generate_ct_like,
    generate_vessel_tree,
)
from .estimator import (
    IpEstimator,
    NoisyOracleEstimator,
    OracleEstimator,
    TopKSumEstimator,
    parse_estimator_spec,
    run_estimator_from_files,
)

__version__ = "0.1.0"

__all__ = [
    "Volume", "VolumeFormatError", "VolumeKind", "apply_mask", "load_volume",
    "resample", "save_volume",
    "MemoryBudgetError", "ProjectionGeometry", "Ray", "SystemMatrix",
    "adjoint_apply", "build_system_matrix", "forward_apply", "make_geometry",
    "ray_for_pixel", "trace_ray",
    "ProjectionStack", "StackFormatError", "TopKStack", "beer_lambert_form",
    "export_image", "integral_projection", "load_stack", "save_stack", "topk_mip",
    "DivergenceError", "FbpConfig", "OptimizerConfig", "OptimizerTrace", "fbp",
    "filter_stack", "reconstruct_pipeline", "suppress_artifacts",
    "SegmentationConfig", "connected_components", "export_component_table",
    "percentile_threshold", "remove_small_components", "scaled_min_size", "segment",
    "ImageQualityReport", "SegmentationReport", "cl_dice", "image_quality",
    "psnr", "segmentation_metrics", "skeletonize", "ssim",
    "CenterlineGraph", "PhantomConfig", "generate_ct_like", "generate_vessel_tree",
    "IpEstimator", "NoisyOracleEstimator", "OracleEstimator", "TopKSumEstimator",
    "parse_estimator_spec", "run_estimator_from_files",
    "__version__",
]
