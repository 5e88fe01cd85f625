"""Confidence thresholding and the five anatomy-based removal methods.

=======  ===============================================================
Method   Removes a detection when
=======  ===============================================================
M1       its box has no voxel inside the brain mask
M2       its box overlaps the (CVS-subtracted) vein mask at all
M3       its box overlaps the vein mask in more voxels than the artery mask
M4       M1 or M2
M5       M1 or M3
=======  ===============================================================
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import InvalidArgumentError
from .masks import MaskSet
from .volume import VoxelBox, box_mask_overlap


@dataclass(frozen=True)
class Detection:
    id: str
    box: VoxelBox
    confidence: float
    # unrecognised JSON fields, carried through serialization untouched
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.box.is_empty:
            raise InvalidArgumentError(f"detection {self.id!r} has an empty box")
        c = self.confidence
        if not (isinstance(c, (int, float)) and math.isfinite(c) and 0.0 <= c <= 1.0):
            raise InvalidArgumentError(f"detection {self.id!r} confidence {c!r} outside [0, 1]")


@dataclass(frozen=True)
class OverlapProfile:
    brain: int
    artery: int
    vein: int
    cvs: int
    box_volume: int

    def __post_init__(self):
        for name in ("brain", "artery", "vein", "cvs"):
            v = getattr(self, name)
            if v < 0 or v > self.box_volume:
                raise InvalidArgumentError(f"{name} overlap {v} outside [0, {self.box_volume}]")

    def as_dict(self) -> dict:
        return {
            "brain": self.brain,
            "artery": self.artery,
            "vein": self.vein,
            "cvs": self.cvs,
            "box_volume": self.box_volume,
        }


class Method(enum.Enum):
    M1 = 1
    M2 = 2
    M3 = 3
    M4 = 4
    M5 = 5

    @classmethod
    def parse(cls, value) -> "Method":
        """Accept ``5``, ``"5"``, ``"M5"`` or ``"m5"``."""
        if isinstance(value, Method):
            return value
        text = str(value).strip().upper()
        if text.startswith("M"):
            text = text[1:]
        try:
            return cls(int(text))
        except ValueError:
            raise InvalidArgumentError(f"unknown method {value!r}; expected 1-5") from None

    def __str__(self):
        return self.name


ALL_METHODS = tuple(Method)


def threshold_detections(dets: Iterable[Detection], tau: float) -> list[Detection]:
    if not (math.isfinite(tau) and 0.0 <= tau <= 1.0):
        raise InvalidArgumentError(f"confidence threshold must be in [0, 1], got {tau}")
    return [d for d in dets if d.confidence >= tau]


def overlap_profile(box: VoxelBox, masks: MaskSet) -> OverlapProfile:
    return OverlapProfile(
        brain=box_mask_overlap(box, masks.brain),
        artery=box_mask_overlap(box, masks.artery),
        vein=box_mask_overlap(box, masks.vein_final),
        cvs=box_mask_overlap(box, masks.cvs),
        box_volume=box.clip(masks.grid.dims).volume,
    )


def _outside_brain(p: OverlapProfile):
    return "M1:brain_overlap=0" if p.brain == 0 else None


def _any_vein(p: OverlapProfile, min_voxels: int):
    return f"M2:vein_overlap={p.vein}>={min_voxels}" if p.vein >= min_voxels else None


def _vein_dominant(p: OverlapProfile):
    return f"M3:vein_overlap={p.vein}>artery_overlap={p.artery}" if p.vein > p.artery else None


def decide_removal(p: OverlapProfile, m: Method, m2_min_voxels: int = 1) -> tuple[bool, str]:
    """Apply one method's rule to a profile.

    Returns ``(remove, reason)``. ``reason`` lists every triggering sub-rule
    separated by ``|``, or is empty when the detection is kept. A vein/artery
    tie keeps the detection.
    """
    if m2_min_voxels < 1:
        raise InvalidArgumentError(f"m2_min_voxels must be >= 1, got {m2_min_voxels}")
    m = Method.parse(m)
    if m is Method.M1:
        rules = [_outside_brain(p)]
    elif m is Method.M2:
        rules = [_any_vein(p, m2_min_voxels)]
    elif m is Method.M3:
        rules = [_vein_dominant(p)]
    elif m is Method.M4:
        rules = [_outside_brain(p), _any_vein(p, m2_min_voxels)]
    else:
        rules = [_outside_brain(p), _vein_dominant(p)]
    fired = [r for r in rules if r]
    return bool(fired), "|".join(fired)


@dataclass(frozen=True)
class Decision:
    detection: Detection
    profile: OverlapProfile
    removed: bool
    reason: str


@dataclass(frozen=True)
class FilterResult:
    """Per-detection decisions for one method, in input order."""

    method: Method
    decisions: tuple[Decision, ...]

    @property
    def kept(self) -> list[Detection]:
        return [d.detection for d in self.decisions if not d.removed]

    @property
    def removed(self) -> list[tuple[Detection, OverlapProfile, str]]:
        return [(d.detection, d.profile, d.reason) for d in self.decisions if d.removed]

    @property
    def removed_ids(self) -> set[str]:
        return {d.detection.id for d in self.decisions if d.removed}

    @property
    def kept_ids(self) -> set[str]:
        return {d.detection.id for d in self.decisions if not d.removed}


def apply_method(
    dets: Sequence[Detection], masks: MaskSet, m: Method, m2_min_voxels: int = 1
) -> FilterResult:
    m = Method.parse(m)
    decisions = []
    for det in dets:
        profile = overlap_profile(det.box, masks)
        removed, reason = decide_removal(profile, m, m2_min_voxels)
        decisions.append(Decision(det, profile, removed, reason))
    return FilterResult(m, tuple(decisions))


def apply_methods(
    dets: Sequence[Detection], masks: MaskSet, methods=ALL_METHODS, m2_min_voxels: int = 1
) -> dict[Method, FilterResult]:
    """Run several methods while computing each detection's profile once."""
    profiles = [overlap_profile(d.box, masks) for d in dets]
    results = {}
    for m in methods:
        m = Method.parse(m)
        decisions = []
        for det, profile in zip(dets, profiles):
            removed, reason = decide_removal(profile, m, m2_min_voxels)
            decisions.append(Decision(det, profile, removed, reason))
        results[m] = FilterResult(m, tuple(decisions))
    return results
