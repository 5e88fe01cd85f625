"""Derived anatomical masks: CVS region box, CVS mask, final vein mask, brain mask."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .volume import (
    Affine4,
    BinaryMask,
    Grid,
    VoxelBox,
    WorldBox,
    dilate_mask,
    expand_world_box,
    mask_boolean,
    require_same_grid,
    transform_world_box,
    voxelize_world_box,
)

logger = logging.getLogger(__name__)

BRAIN_DILATION_MM = 3.6
CVS_EXPAND_MM = 3.2
CONFIDENCE_THRESHOLD = 0.8


@dataclass(frozen=True)
class PipelineParams:
    brain_dilation_mm: float = BRAIN_DILATION_MM
    cvs_expand_mm: float = CVS_EXPAND_MM
    confidence_threshold: float = CONFIDENCE_THRESHOLD
    # add the expanded (True) or the bare registered (False) CVS box to the brain mask
    brain_uses_expanded_box: bool = True

    def __post_init__(self):
        for name in ("brain_dilation_mm", "cvs_expand_mm"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise InvalidArgumentError(f"{name} must be finite and >= 0, got {value}")
        tau = self.confidence_threshold
        if not math.isfinite(tau) or not 0.0 <= tau <= 1.0:
            raise InvalidArgumentError(f"confidence_threshold must be in [0, 1], got {tau}")


@dataclass(frozen=True, eq=False)
class MaskSet:
    brain: BinaryMask
    artery: BinaryMask
    vein_final: BinaryMask
    cvs: BinaryMask
    cvs_region_box: VoxelBox

    def __post_init__(self):
        require_same_grid(self.brain.grid, self.artery.grid, self.vein_final.grid, self.cvs.grid)

    @property
    def grid(self) -> Grid:
        return self.brain.grid

    def check_invariants(self, vein: BinaryMask | None = None) -> list[str]:
        """Return descriptions of every violated invariant (empty when sound).

        Pass the original ``vein`` input to also check that the subtraction
        partitions it.
        """
        problems = []
        if np.any(self.vein_final.occupancy & self.cvs.occupancy):
            problems.append("vein_final and cvs overlap")
        box_mask = BinaryMask.from_box(self.grid, self.cvs_region_box).occupancy
        if np.any(self.cvs.occupancy & ~box_mask):
            problems.append("cvs extends outside cvs_region_box")
        if not np.all(self.brain.occupancy[box_mask]):
            problems.append("brain does not cover cvs_region_box")
        if vein is not None:
            if np.any(self.cvs.occupancy & ~vein.occupancy):
                problems.append("cvs is not a subset of vein")
            if not np.array_equal(self.vein_final.occupancy | self.cvs.occupancy, vein.occupancy):
                problems.append("vein_final | cvs != vein")
        return problems


def build_cvs_region_box(
    template_box: WorldBox, t: Affine4, expand_mm: float, grid: Grid
) -> VoxelBox:
    """Register the template box into the target, then grow it by ``expand_mm``."""
    registered = transform_world_box(t, template_box)
    return voxelize_world_box(expand_world_box(registered, expand_mm), grid)


def build_cvs_mask(cvs_region_box: VoxelBox, vein: BinaryMask) -> BinaryMask:
    occ = np.zeros(vein.grid.dims, dtype=bool)
    box = cvs_region_box.clip(vein.grid.dims)
    if not box.is_empty:
        occ[box.slices] = vein.occupancy[box.slices]
    return BinaryMask(vein.grid, occ)


def build_vein_final(vein: BinaryMask, cvs: BinaryMask) -> BinaryMask:
    return mask_boolean(vein, cvs, "subtract")


def build_brain_mask(brain_seg: BinaryMask, cvs_region_box: VoxelBox, dilate_mm: float) -> BinaryMask:
    dilated = dilate_mask(brain_seg, dilate_mm)
    box = cvs_region_box.clip(brain_seg.grid.dims)
    if box.is_empty:
        return dilated
    occ = np.array(dilated.occupancy)  # writable copy
    occ[box.slices] = True
    return BinaryMask(brain_seg.grid, occ)


def build_mask_set(
    brain_seg: BinaryMask,
    artery: BinaryMask,
    vein: BinaryMask,
    template_box: WorldBox,
    t: Affine4,
    params: PipelineParams = PipelineParams(),
) -> MaskSet:
    grid = require_same_grid(brain_seg.grid, artery.grid, vein.grid)
    region = build_cvs_region_box(template_box, t, params.cvs_expand_mm, grid)
    if region.is_empty:
        logger.warning("CVS region box falls outside the grid; CVS mask will be empty")
    cvs = build_cvs_mask(region, vein)
    vein_final = build_vein_final(vein, cvs)
    if params.brain_uses_expanded_box:
        brain_box = region
    else:
        brain_box = build_cvs_region_box(template_box, t, 0.0, grid)
    brain = build_brain_mask(brain_seg, brain_box, params.brain_dilation_mm)
    return MaskSet(brain=brain, artery=artery, vein_final=vein_final, cvs=cvs, cvs_region_box=region)
