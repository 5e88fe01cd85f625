"""Synthetic head phantoms with planted aneurysms and decoy detections.

A phantom is a brain ellipsoid plus artery and vein tubes rasterized onto a
grid, a template CVS box, ground-truth aneurysm boxes sitting on arteries and
decoy detections whose anatomical category is known by construction.

Decoy kinds and the methods expected to remove them:

=============  ==================  ======================
kind           expected category   removed by
=============  ==================  ======================
extracranial   extracranial        M1, M4, M5
venous         venous              M2, M3, M4, M5
tie            arterial            M2, M4
arterial       arterial            (never)
nonvascular    nonvascular         (never)
cvs            cvs                 (never)
=============  ==================  ======================
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .evaluation import FpCategory, GroundTruthBox
from .filtering import Detection, Method
from .masks import BRAIN_DILATION_MM, CVS_EXPAND_MM, build_cvs_region_box
from .oracles import oracle_box_overlap, oracle_radius
from .volume import Affine4, BinaryMask, Grid, WorldBox, voxelize_world_box

ANEURYSM = "aneurysm"
VEIN_TOUCHING_ANEURYSM = "aneurysm_vein_touching"

DECOY_KINDS = ("extracranial", "venous", "tie", "arterial", "nonvascular", "cvs")

EXPECTED_CATEGORY = {
    "extracranial": FpCategory.EXTRACRANIAL,
    "venous": FpCategory.VENOUS,
    "tie": FpCategory.ARTERIAL,
    "arterial": FpCategory.ARTERIAL,
    "nonvascular": FpCategory.NONVASCULAR,
    "cvs": FpCategory.CVS,
}

M1, M2, M3, M4, M5 = Method
EXPECTED_REMOVAL = {
    "extracranial": frozenset({M1, M4, M5}),
    "venous": frozenset({M2, M3, M4, M5}),
    "tie": frozenset({M2, M4}),
    "arterial": frozenset(),
    "nonvascular": frozenset(),
    "cvs": frozenset(),
    ANEURYSM: frozenset(),
    VEIN_TOUCHING_ANEURYSM: frozenset({M2, M4}),
}


@dataclass(frozen=True)
class Ellipsoid:
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]


@dataclass(frozen=True)
class Tube:
    points_mm: tuple[tuple[float, float, float], ...]
    radius_mm: float


@dataclass(frozen=True)
class Decoy:
    box: WorldBox
    kind: str
    # None: drawn uniformly from [0.5, 1.0] using the generation seed
    confidence: float | None = None


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    brain: Ellipsoid
    artery_paths: tuple[Tube, ...]
    vein_paths: tuple[Tube, ...]
    template_cvs_box: WorldBox
    gt_aneurysms: tuple[WorldBox, ...]
    decoys: tuple[Decoy, ...] = ()
    # GT boxes expected to touch the vein mask (lost under M2/M4)
    vein_touching: tuple[bool, ...] = ()
    transform: Affine4 = field(default_factory=Affine4.identity)
    brain_margin_mm: float = BRAIN_DILATION_MM
    cvs_expand_mm: float = CVS_EXPAND_MM

    @property
    def grid(self) -> Grid:
        return Grid(self.dims, self.spacing_mm)

    def to_dict(self) -> dict:
        def box(b):
            return {"min_world_mm": list(b.min_mm), "max_world_mm": list(b.max_mm)}

        def tube(t):
            return {"points_mm": [list(p) for p in t.points_mm], "radius_mm": t.radius_mm}

        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing_mm),
            "brain": {"center_mm": list(self.brain.center_mm), "radii_mm": list(self.brain.radii_mm)},
            "artery_paths": [tube(t) for t in self.artery_paths],
            "vein_paths": [tube(t) for t in self.vein_paths],
            "template_cvs_box": box(self.template_cvs_box),
            "gt_aneurysms": [box(b) for b in self.gt_aneurysms],
            "vein_touching": list(self.vein_touching),
            "decoys": [{**box(d.box), "kind": d.kind, "confidence": d.confidence} for d in self.decoys],
            "transform": self.transform.m.tolist(),
            "brain_margin_mm": self.brain_margin_mm,
            "cvs_expand_mm": self.cvs_expand_mm,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PhantomSpec":
        def box(d):
            return WorldBox(tuple(d["min_world_mm"]), tuple(d["max_world_mm"]))

        def tube(d):
            return Tube(tuple(tuple(p) for p in d["points_mm"]), float(d["radius_mm"]))

        try:
            return cls(
                dims=tuple(doc["dims"]),
                spacing_mm=tuple(doc["spacing_mm"]),
                brain=Ellipsoid(tuple(doc["brain"]["center_mm"]), tuple(doc["brain"]["radii_mm"])),
                artery_paths=tuple(tube(t) for t in doc.get("artery_paths", [])),
                vein_paths=tuple(tube(t) for t in doc.get("vein_paths", [])),
                template_cvs_box=box(doc["template_cvs_box"]),
                gt_aneurysms=tuple(box(b) for b in doc.get("gt_aneurysms", [])),
                vein_touching=tuple(bool(v) for v in doc.get("vein_touching", [])),
                decoys=tuple(
                    Decoy(box(d), d["kind"], d.get("confidence")) for d in doc.get("decoys", [])
                ),
                transform=Affine4(doc.get("transform", np.eye(4))),
                brain_margin_mm=float(doc.get("brain_margin_mm", BRAIN_DILATION_MM)),
                cvs_expand_mm=float(doc.get("cvs_expand_mm", CVS_EXPAND_MM)),
            )
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"bad phantom spec: missing or malformed field {exc}") from exc


@dataclass(frozen=True, eq=False)
class PhantomCase:
    brain_seg: BinaryMask
    artery: BinaryMask
    vein: BinaryMask
    template_cvs_box: WorldBox
    transform: Affine4
    detections: tuple[Detection, ...]
    ground_truth: tuple[GroundTruthBox, ...]
    planted_labels: dict[str, str]

    @property
    def grid(self) -> Grid:
        return self.brain_seg.grid


# --------------------------------------------------------------------------
# rasterization
# --------------------------------------------------------------------------


def _voxel_centers(grid: Grid) -> np.ndarray:
    idx = np.indices(grid.dims, dtype=float).reshape(3, -1).T + 0.5
    return grid.index_to_world.apply(idx)


def rasterize_ellipsoid(grid: Grid, e: Ellipsoid, centers=None) -> np.ndarray:
    c = _voxel_centers(grid) if centers is None else centers
    q = (((c - np.asarray(e.center_mm)) / np.asarray(e.radii_mm)) ** 2).sum(axis=1)
    return (q <= 1.0).reshape(grid.dims)


def _segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    denom = float(ab @ ab)
    if denom == 0.0:
        return np.linalg.norm(points - a, axis=1)
    t = np.clip((points - a) @ ab / denom, 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def rasterize_tubes(grid: Grid, tubes, centers=None) -> np.ndarray:
    c = _voxel_centers(grid) if centers is None else centers
    occ = np.zeros(len(c), dtype=bool)
    for tube in tubes:
        pts = np.asarray(tube.points_mm, dtype=float)
        for a, b in zip(pts[:-1], pts[1:]):
            occ |= _segment_distance(c, a, b) <= tube.radius_mm
    return occ.reshape(grid.dims)


# --------------------------------------------------------------------------
# validation and generation
# --------------------------------------------------------------------------


def _inside_grid(grid: Grid, p) -> bool:
    idx = grid.index_to_world.inverse().apply(np.asarray(p, dtype=float))
    return all(0.0 <= v <= d for v, d in zip(idx, grid.dims))


def _check_decoy(kind, box, region, brain_seg, artery, vein, margin_vox) -> str | None:
    brain = oracle_box_overlap(box, brain_seg)
    art = oracle_box_overlap(box, artery)
    vn = oracle_box_overlap(box, vein)
    in_region = not box.intersection(region).is_empty
    if kind == "extracranial":
        if oracle_box_overlap(box.expand(margin_vox), brain_seg) or in_region or vn:
            return "must clear the dilated brain, the CVS region and every vein"
    elif kind == "cvs":
        if box.intersection(region) != box or vn < 1 or vn < art:
            return "must lie inside the CVS region on a vein at least as large as its artery overlap"
    else:
        if brain < 1 or in_region:
            return "must touch the brain and stay clear of the CVS region"
        ok = {
            "venous": vn > art,
            "tie": vn == art and vn >= 1,
            "arterial": art >= 1 and vn == 0,
            "nonvascular": art == 0 and vn == 0,
        }.get(kind)
        if ok is None:
            return f"unknown decoy kind (expected one of {DECOY_KINDS})"
        if not ok:
            return f"vessel overlap artery={art} vein={vn} does not realise the kind"
    return None


def generate_phantom(spec: PhantomSpec, seed: int) -> PhantomCase:
    """Rasterize ``spec`` and draw detection confidences from ``seed``.

    Raises :class:`ValidationError` listing every planted structure whose
    intended relationship to the masks does not hold after rasterization.
    """
    grid = spec.grid
    problems = []
    for name, tubes in (("artery", spec.artery_paths), ("vein", spec.vein_paths)):
        for i, t in enumerate(tubes):
            if len(t.points_mm) < 2 or t.radius_mm <= 0:
                problems.append(f"{name} path {i}: needs >= 2 points and a positive radius")
            for p in t.points_mm:
                if not _inside_grid(grid, p):
                    problems.append(f"{name} path {i}: point {tuple(p)} lies outside the grid")
    if spec.vein_touching and len(spec.vein_touching) != len(spec.gt_aneurysms):
        problems.append("vein_touching must have one flag per ground-truth box")
    if problems:
        raise ValidationError("invalid phantom spec", problems)

    centers = _voxel_centers(grid)
    brain_seg = BinaryMask(grid, rasterize_ellipsoid(grid, spec.brain, centers))
    artery = BinaryMask(grid, rasterize_tubes(grid, spec.artery_paths, centers))
    vein = BinaryMask(grid, rasterize_tubes(grid, spec.vein_paths, centers))
    region = build_cvs_region_box(spec.template_cvs_box, spec.transform, spec.cvs_expand_mm, grid)
    margin_vox = oracle_radius(grid.spacing_mm, spec.brain_margin_mm)

    rng = np.random.default_rng(seed)
    touching = spec.vein_touching or (False,) * len(spec.gt_aneurysms)
    detections, ground_truth, labels = [], [], {}
    for i, (wbox, touches) in enumerate(zip(spec.gt_aneurysms, touching)):
        box = voxelize_world_box(wbox, grid)
        if box.is_empty:
            problems.append(f"aneurysm {i}: box lies outside the grid")
            continue
        art = oracle_box_overlap(box, artery)
        vn = oracle_box_overlap(box, vein)
        brain = oracle_box_overlap(box, brain_seg)
        in_region = box.intersection(region) == box
        if art < 1 or art < vn:
            problems.append(f"aneurysm {i}: artery overlap {art} must be >= 1 and >= vein overlap {vn}")
        if brain < 1 and not in_region:
            problems.append(f"aneurysm {i}: must touch the brain or sit inside the CVS region")
        if touches and (vn < 1 or in_region):
            problems.append(f"aneurysm {i}: flagged vein-touching but has no vein outside the CVS region")
        if not touches and vn >= 1 and not in_region:
            problems.append(f"aneurysm {i}: touches a vein outside the CVS region but is not flagged")
        gid = f"gt-{i}"
        ground_truth.append(GroundTruthBox(gid, box))
        det_id = f"a{i}"
        detections.append(Detection(det_id, box, float(rng.uniform(0.85, 1.0))))
        labels[det_id] = VEIN_TOUCHING_ANEURYSM if touches else ANEURYSM

    per_kind: dict[str, int] = {}
    for decoy in spec.decoys:
        n = per_kind.get(decoy.kind, 0)
        per_kind[decoy.kind] = n + 1
        det_id = f"{decoy.kind}-{n}"
        box = voxelize_world_box(decoy.box, grid)
        drawn = float(rng.uniform(0.5, 1.0))
        conf = drawn if decoy.confidence is None else float(decoy.confidence)
        if box.is_empty:
            problems.append(f"decoy {det_id}: box lies outside the grid")
            continue
        why = _check_decoy(decoy.kind, box, region, brain_seg, artery, vein, margin_vox)
        if why:
            problems.append(f"decoy {det_id}: {why}")
        detections.append(Detection(det_id, box, conf))
        labels[det_id] = decoy.kind

    if problems:
        raise ValidationError("phantom spec is not realisable", problems)
    return PhantomCase(
        brain_seg=brain_seg,
        artery=artery,
        vein=vein,
        template_cvs_box=spec.template_cvs_box,
        transform=spec.transform,
        detections=tuple(detections),
        ground_truth=tuple(ground_truth),
        planted_labels=labels,
    )


# --------------------------------------------------------------------------
# the standard layout
# --------------------------------------------------------------------------


def _shift_box(b: WorldBox, d) -> WorldBox:
    return WorldBox(tuple(v + o for v, o in zip(b.min_mm, d)), tuple(v + o for v, o in zip(b.max_mm, d)))


def _shift_tube(t: Tube, d) -> Tube:
    return Tube(tuple(tuple(v + o for v, o in zip(p, d)) for p in t.points_mm), t.radius_mm)


def _wb(lo, hi) -> WorldBox:
    return WorldBox(tuple(float(v) for v in lo), tuple(float(v) for v in hi))


STANDARD_TEMPLATE_CVS_BOX = _wb((26, 18, 22), (36, 28, 30))


def standard_phantom_spec(
    layout_seed: int = 0, vein_touching_gt: bool = False, decoy_confidence: float | None = None
) -> PhantomSpec:
    """A 64^3, 1 mm head phantom carrying one decoy of every kind.

    ``layout_seed`` jitters the brain radii and shifts the intracranial
    anatomy by up to 2 voxels per axis. With ``vein_touching_gt`` a third
    aneurysm is planted next to a small vein so that M2 and M4 lose it.
    ``decoy_confidence`` pins every decoy's confidence instead of drawing it.
    """
    rng = np.random.default_rng(layout_seed)
    shift = tuple(int(v) for v in rng.integers(-2, 3, size=3))
    radii = tuple(float(r + j) for r, j in zip((18, 20, 16), rng.integers(-1, 2, size=3)))

    arteries = [
        Tube(((20, 18, 30), (20, 46, 30)), 2.0),
        Tube(((34, 18, 26), (34, 28, 26)), 2.0),  # runs through the CVS region
        Tube(((24, 34, 40), (24, 42, 40)), 1.5),  # tie pair, mirrored by a vein at x=30
    ]
    veins = [
        Tube(((42, 18, 46), (42, 46, 46)), 2.0),
        Tube(((30, 18, 26), (30, 28, 26)), 2.0),  # cavernous sinus
        Tube(((30, 34, 40), (30, 42, 40)), 1.5),
    ]
    gts = [
        _wb((17, 24, 27), (23, 30, 33)),
        _wb((31, 20, 23), (37, 26, 29)),  # CVS-adjacent
    ]
    touching = [False, False]
    if vein_touching_gt:
        veins.append(Tube(((25, 39, 24), (25, 39, 36)), 1.0))
        gts.append(_wb((17, 36, 27), (25, 42, 33)))
        touching.append(True)

    decoys = [
        Decoy(_wb((39, 28, 43), (45, 34, 49)), "venous", decoy_confidence),
        Decoy(_wb((22, 35, 37), (32, 41, 43)), "tie", decoy_confidence),
        Decoy(_wb((17, 32, 27), (23, 36, 33)), "arterial", decoy_confidence),
        Decoy(_wb((30, 40, 26), (36, 46, 32)), "nonvascular", decoy_confidence),
        Decoy(_wb((27, 21, 24), (31, 25, 28)), "cvs", decoy_confidence),
    ]
    # everything intracranial moves together; the extracranial decoy stays in the corner
    decoys = [Decoy(_shift_box(d.box, shift), d.kind, d.confidence) for d in decoys]
    decoys.insert(0, Decoy(_wb((2, 2, 2), (8, 8, 8)), "extracranial", decoy_confidence))

    return PhantomSpec(
        dims=(64, 64, 64),
        spacing_mm=(1.0, 1.0, 1.0),
        brain=Ellipsoid(tuple(float(v + s) for v, s in zip((32, 32, 34), shift)), radii),
        artery_paths=tuple(_shift_tube(t, shift) for t in arteries),
        vein_paths=tuple(_shift_tube(t, shift) for t in veins),
        # the template box is fixed; the case's registration carries the shift
        template_cvs_box=STANDARD_TEMPLATE_CVS_BOX,
        transform=Affine4.from_translation(shift),
        gt_aneurysms=tuple(_shift_box(b, shift) for b in gts),
        decoys=tuple(decoys),
        vein_touching=tuple(touching),
    )
