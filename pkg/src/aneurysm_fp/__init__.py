"""Anatomy-based false-positive reduction for intracranial aneurysm detections."""
from .errors import (
    GeometryMismatchError,
    InvalidArgumentError,
    InvalidTransformError,
    ParseError,
    ValidationError,
)
from .evaluation import (
    FpCategory,
    GroundTruthBox,
    Matching,
    Metrics,
    Report,
    box_iou,
    build_report,
    categorize_fp,
    compute_metrics,
    match_detections,
    reduction_percentage,
)
from .filtering import (
    Detection,
    FilterResult,
    Method,
    OverlapProfile,
    apply_method,
    apply_methods,
    decide_removal,
    overlap_profile,
    threshold_detections,
)
from .masks import (
    MaskSet,
    PipelineParams,
    build_brain_mask,
    build_cvs_mask,
    build_cvs_region_box,
    build_mask_set,
    build_vein_final,
)
from .volume import (
    Affine4,
    BinaryMask,
    Grid,
    Volume3D,
    VoxelBox,
    WorldBox,
    box_mask_overlap,
    dilate_mask,
    expand_world_box,
    mask_boolean,
    mm_to_voxel_radius,
    transform_world_box,
    voxelize_world_box,
)

__version__ = "0.1.0"

__all__ = [
    "GeometryMismatchError",
    "InvalidArgumentError",
    "InvalidTransformError",
    "ParseError",
    "ValidationError",
    "FpCategory",
    "GroundTruthBox",
    "Matching",
    "Metrics",
    "Report",
    "box_iou",
    "build_report",
    "categorize_fp",
    "compute_metrics",
    "match_detections",
    "reduction_percentage",
    "Detection",
    "FilterResult",
    "Method",
    "OverlapProfile",
    "apply_method",
    "apply_methods",
    "decide_removal",
    "overlap_profile",
    "threshold_detections",
    "MaskSet",
    "PipelineParams",
    "build_brain_mask",
    "build_cvs_mask",
    "build_cvs_region_box",
    "build_mask_set",
    "build_vein_final",
    "Affine4",
    "BinaryMask",
    "Grid",
    "Volume3D",
    "VoxelBox",
    "WorldBox",
    "box_mask_overlap",
    "dilate_mask",
    "expand_world_box",
    "mask_boolean",
    "mm_to_voxel_radius",
    "transform_world_box",
    "voxelize_world_box",
]
