"""File formats and case layout.

NIfTI affines map a voxel index to the voxel *center*; inside the package a
grid's ``index_to_world`` maps the continuous cell coordinate, where voxel
``k`` spans ``[k, k + 1)``. The two differ by half a voxel and are converted
here, at the file boundary, so world-space boxes land on the right voxels.
"""
from __future__ import annotations

import gzip
import json
import math
import os
import struct
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import nibabel as nib
import numpy as np

from .errors import InvalidTransformError, ParseError, ValidationError
from .evaluation import GroundTruthBox, Metrics
from .filtering import Decision, Detection, FilterResult, Method, OverlapProfile
from .masks import MaskSet, PipelineParams
from .volume import Affine4, BinaryMask, Grid, Volume3D, VoxelBox, WorldBox

# case directory layout
BRAIN_SEG = "brain_seg"
ARTERY = "artery"
VEIN = "vein"
TRANSFORM_FILE = "transform.txt"
DETECTIONS_FILE = "detections.json"
GROUND_TRUTH_FILE = "ground_truth.json"
TEMPLATE_CVS_FILE = "template_cvs.json"
PLANTED_LABELS_FILE = "planted_labels.json"

# mask directory layout
MASK_NAMES = ("brain", "artery", "vein_final", "cvs")
CVS_REGION_BOX_FILE = "cvs_region_box.json"

_HALF = Affine4.from_translation((0.5, 0.5, 0.5))
_MINUS_HALF = Affine4.from_translation((-0.5, -0.5, -0.5))

# NIfTI-1 datatype codes we can turn into masks
_SUPPORTED_DTYPES = {2, 4, 8, 16, 64, 256, 512, 768, 1024, 1280}


# --------------------------------------------------------------------------
# atomic output
# --------------------------------------------------------------------------


@contextmanager
def atomic_path(path):
    """Yield a temp path next to ``path``; rename over ``path`` on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # keep the full suffix so nibabel picks the right format (.nii.gz)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix="".join(path.suffixes), dir=path.parent)
    os.close(fd)
    try:
        yield Path(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text(path, text: str) -> None:
    with atomic_path(path) as tmp:
        tmp.write_text(text)


def write_json(path, doc) -> None:
    write_text(path, json.dumps(doc, indent=2) + "\n")


def read_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except UnicodeDecodeError as exc:
        raise ParseError("not a UTF-8 text file", path, exc.start) from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg} (line {exc.lineno})", path, exc.pos) from exc


# --------------------------------------------------------------------------
# NIfTI
# --------------------------------------------------------------------------


def _read_header_bytes(path: Path) -> bytes:
    opener = gzip.open if path.name.endswith(".gz") else open
    try:
        with opener(path, "rb") as fh:
            return fh.read(348)
    except (OSError, EOFError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ParseError(f"cannot read header: {exc}", path, 0) from exc


def _check_nifti_header(path: Path) -> None:
    raw = _read_header_bytes(path)
    if len(raw) < 348:
        raise ParseError(f"file is {len(raw)} bytes, shorter than a NIfTI-1 header", path, len(raw))
    for endian in "<>":
        if struct.unpack(endian + "i", raw[:4])[0] == 348:
            break
    else:
        raise ParseError("sizeof_hdr is not 348; not a NIfTI-1 file", path, 0)
    magic = raw[344:348]
    if magic not in (b"n+1\0", b"ni1\0"):
        raise ParseError(f"bad magic {magic!r}", path, 344)
    dim = struct.unpack(endian + "8h", raw[40:56])
    if dim[0] != 3:
        raise ParseError(f"expected a 3-D volume, header declares {dim[0]} dimensions {dim[1:1 + max(dim[0], 0)]}", path, 40)
    if min(dim[1:4]) < 1:
        raise ParseError(f"non-positive dimension in {dim[1:4]}", path, 42)
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    if datatype not in _SUPPORTED_DTYPES:
        raise ParseError(f"unsupported datatype code {datatype}", path, 70)
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    if not all(math.isfinite(p) and p > 0 for p in pixdim[1:4]):
        raise ParseError(f"voxel spacing {pixdim[1:4]} must be positive", path, 80)


def _load(path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    _check_nifti_header(path)
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a zoo of types
        raise ParseError(f"cannot load NIfTI: {exc}", path) from exc
    if not isinstance(img, nib.Nifti1Image):
        raise ParseError(f"not a NIfTI-1 image ({type(img).__name__})", path)
    return img


def _grid_from_header(img: nib.Nifti1Image, path) -> Grid:
    hdr = img.header
    spacing = tuple(float(z) for z in hdr.get_zooms()[:3])
    affine = None
    sform, scode = hdr.get_sform(coded=True)
    if scode:
        affine = sform
    else:
        qform, qcode = hdr.get_qform(coded=True)
        if qcode:
            affine = qform
    if affine is None:
        affine = np.diag([*spacing, 1.0])
    try:
        center_affine = Affine4(affine)
    except InvalidTransformError as exc:
        raise ParseError(f"bad orientation matrix: {exc}", path, 280) from exc
    return Grid(tuple(int(d) for d in img.shape[:3]), spacing, center_affine.compose(_MINUS_HALF))


def nifti_affine(grid: Grid) -> np.ndarray:
    """The voxel-center affine stored in NIfTI headers for ``grid``."""
    return grid.index_to_world.compose(_HALF).m.copy()


def read_volume(path) -> Volume3D:
    img = _load(path)
    grid = _grid_from_header(img, path)
    return Volume3D(grid, np.asanyarray(img.dataobj))


def read_mask(path) -> BinaryMask:
    img = _load(path)
    grid = _grid_from_header(img, path)
    return BinaryMask(grid, np.asanyarray(img.dataobj) > 0.5)


def _save(path, data: np.ndarray, grid: Grid) -> None:
    affine = nifti_affine(grid)
    img = nib.Nifti1Image(data, affine)
    img.header.set_zooms(grid.spacing_mm)
    img.set_sform(affine, code=1)
    img.set_qform(affine, code=1)
    with atomic_path(path) as tmp:
        nib.save(img, str(tmp))


def write_mask(path, mask: BinaryMask) -> None:
    _save(path, mask.occupancy.astype(np.uint8), mask.grid)


def write_volume(path, volume: Volume3D) -> None:
    _save(path, np.asarray(volume.data), volume.grid)


def find_volume(directory, stem: str) -> Path:
    directory = Path(directory)
    for suffix in (".nii.gz", ".nii"):
        candidate = directory / f"{stem}{suffix}"
        if candidate.exists():
            return candidate
    raise FileNotFoundError(directory / f"{stem}.nii.gz")


# --------------------------------------------------------------------------
# detection documents
# --------------------------------------------------------------------------


@dataclass
class DetectionDocument:
    case_id: str
    detections: list
    # unknown top-level fields, preserved on round trip
    extra: dict = field(default_factory=dict)


def _parse_box_entry(entry, index, problems) -> VoxelBox | None:
    try:
        lo = entry["min_voxel"]
        hi = entry["max_voxel"]
    except KeyError as exc:
        problems.append(f"entry {index}: missing {exc.args[0]!r}")
        return None
    ok = (
        isinstance(lo, list)
        and isinstance(hi, list)
        and len(lo) == 3
        and len(hi) == 3
        and all(isinstance(v, int) and not isinstance(v, bool) for v in lo + hi)
    )
    if not ok:
        problems.append(f"entry {index}: min_voxel/max_voxel must be 3 integers each")
        return None
    if any(h <= l for l, h in zip(lo, hi)):
        problems.append(f"entry {index} ({entry.get('id')!r}): min_voxel {lo} not below max_voxel {hi} on every axis")
        return None
    return VoxelBox(tuple(lo), tuple(hi))


def _parse_document(doc, path, with_confidence: bool) -> DetectionDocument:
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: top level must be an object")
    problems = []
    case_id = doc.get("case_id")
    if not isinstance(case_id, str):
        problems.append("'case_id' must be a string")
    items = doc.get("detections")
    if not isinstance(items, list):
        raise ValidationError(f"{path}: invalid document", problems + ["'detections' must be an array"])

    seen = {}
    parsed = []
    for i, entry in enumerate(items):
        if not isinstance(entry, dict):
            problems.append(f"entry {i}: must be an object")
            continue
        did = entry.get("id")
        if not isinstance(did, str) or not did:
            problems.append(f"entry {i}: 'id' must be a non-empty string")
            continue
        if did in seen:
            problems.append(f"entry {i}: duplicate id {did!r} (first at entry {seen[did]})")
            continue
        seen[did] = i
        box = _parse_box_entry(entry, i, problems)
        extra = {k: v for k, v in entry.items() if k not in ("id", "min_voxel", "max_voxel", "confidence")}
        if with_confidence:
            conf = entry.get("confidence")
            if isinstance(conf, bool) or not isinstance(conf, (int, float)) or not (0.0 <= conf <= 1.0):
                problems.append(f"entry {i} ({did!r}): confidence {conf!r} must be a number in [0, 1]")
                continue
            if box is not None:
                parsed.append(Detection(did, box, float(conf), extra))
        else:
            if "confidence" in entry:
                extra["confidence"] = entry["confidence"]
            if box is not None:
                parsed.append(GroundTruthBox(did, box, extra))
    if problems:
        raise ValidationError(f"{path}: invalid document", problems)
    top = {k: v for k, v in doc.items() if k not in ("case_id", "detections")}
    return DetectionDocument(case_id, parsed, top)


def _dump_document(case_id: str, items, extra: dict | None, with_confidence: bool) -> dict:
    out = {"case_id": case_id}
    out.update(extra or {})
    entries = []
    for it in items:
        e = {"id": it.id, "min_voxel": list(it.box.min), "max_voxel": list(it.box.max)}
        if with_confidence:
            e["confidence"] = it.confidence
        e.update(it.extra)
        entries.append(e)
    out["detections"] = entries
    return out


def read_detections(path) -> DetectionDocument:
    return _parse_document(read_json(path), path, with_confidence=True)


def write_detections(path, case_id: str, detections: Iterable[Detection], extra: dict | None = None) -> None:
    write_json(path, _dump_document(case_id, list(detections), extra, with_confidence=True))


def read_ground_truth(path) -> DetectionDocument:
    return _parse_document(read_json(path), path, with_confidence=False)


def write_ground_truth(path, case_id: str, boxes: Iterable[GroundTruthBox], extra: dict | None = None) -> None:
    write_json(path, _dump_document(case_id, list(boxes), extra, with_confidence=False))


# --------------------------------------------------------------------------
# transforms and boxes
# --------------------------------------------------------------------------


def read_affine(path) -> Affine4:
    """Read a 4x4 whitespace-separated matrix (template world -> target world)."""
    path = Path(path)
    rows = []
    offset = 0
    for lineno, line in enumerate(path.read_text().splitlines(keepends=True), start=1):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            try:
                rows.append([float(tok) for tok in stripped.split()])
            except ValueError:
                bad = next(t for t in stripped.split() if not _is_float(t))
                raise ParseError(f"line {lineno}: non-numeric token {bad!r}", path, offset + line.find(bad)) from None
            if len(rows[-1]) != 4:
                raise ParseError(f"line {lineno}: expected 4 numbers, found {len(rows[-1])}", path, offset)
        offset += len(line.encode())
    if len(rows) != 4:
        raise ParseError(f"expected 4 rows, found {len(rows)}", path)
    try:
        return Affine4(np.array(rows))
    except InvalidTransformError as exc:
        raise InvalidTransformError(f"{path}: {exc}") from exc


def _is_float(tok: str) -> bool:
    try:
        float(tok)
    except ValueError:
        return False
    return True


def write_affine(path, t: Affine4) -> None:
    text = "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in t.m)
    write_text(path, text)


def read_world_box(path) -> WorldBox:
    doc = read_json(path)
    try:
        return WorldBox(tuple(doc["min_world_mm"]), tuple(doc["max_world_mm"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: expected 'min_world_mm' and 'max_world_mm' triples") from exc


def write_world_box(path, box: WorldBox) -> None:
    write_json(path, {"min_world_mm": list(box.min_mm), "max_world_mm": list(box.max_mm)})


def read_voxel_box(path) -> VoxelBox:
    doc = read_json(path)
    try:
        return VoxelBox(tuple(doc["min_voxel"]), tuple(doc["max_voxel"]))
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"{path}: expected 'min_voxel' and 'max_voxel' triples") from exc


def write_voxel_box(path, box: VoxelBox, **extra) -> None:
    write_json(path, {"min_voxel": list(box.min), "max_voxel": list(box.max), "empty": box.is_empty, **extra})


# --------------------------------------------------------------------------
# mask sets and cases
# --------------------------------------------------------------------------


def write_mask_set(directory, masks: MaskSet) -> None:
    directory = Path(directory)
    for name in MASK_NAMES:
        write_mask(directory / f"{name}.nii.gz", getattr(masks, name))
    write_voxel_box(directory / CVS_REGION_BOX_FILE, masks.cvs_region_box)


def read_mask_set(directory) -> MaskSet:
    directory = Path(directory)
    loaded = {name: read_mask(find_volume(directory, name)) for name in MASK_NAMES}
    return MaskSet(cvs_region_box=read_voxel_box(directory / CVS_REGION_BOX_FILE), **loaded)


@dataclass
class CaseDirectory:
    case_id: str
    root: Path

    @classmethod
    def open(cls, root) -> "CaseDirectory":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(root)
        return cls(root.resolve().name, root)

    @property
    def brain_seg(self) -> Path:
        return find_volume(self.root, BRAIN_SEG)

    @property
    def artery(self) -> Path:
        return find_volume(self.root, ARTERY)

    @property
    def vein(self) -> Path:
        return find_volume(self.root, VEIN)

    @property
    def transform(self) -> Path:
        return self.root / TRANSFORM_FILE

    @property
    def detections(self) -> Path:
        return self.root / DETECTIONS_FILE

    @property
    def ground_truth(self) -> Path | None:
        p = self.root / GROUND_TRUTH_FILE
        return p if p.exists() else None

    def load_masks(self) -> tuple[BinaryMask, BinaryMask, BinaryMask]:
        return read_mask(self.brain_seg), read_mask(self.artery), read_mask(self.vein)

    def load_transform(self, invert: bool = False) -> Affine4:
        t = read_affine(self.transform) if self.transform.exists() else Affine4.identity()
        return t.inverse() if invert else t

    def load_detections(self) -> list[Detection]:
        doc = read_detections(self.detections)
        self._check_case_id(doc, self.detections)
        return doc.detections

    def load_ground_truth(self) -> list[GroundTruthBox]:
        if self.ground_truth is None:
            raise FileNotFoundError(self.root / GROUND_TRUTH_FILE)
        doc = read_ground_truth(self.ground_truth)
        self._check_case_id(doc, self.ground_truth)
        return doc.detections

    def _check_case_id(self, doc: DetectionDocument, path):
        if doc.case_id != self.case_id:
            raise ValidationError(f"{path}: case_id {doc.case_id!r} does not match directory name {self.case_id!r}")


def write_case(directory, case_id: str, case) -> None:
    """Write a :class:`~aneurysm_fp.phantom.PhantomCase` as a case directory."""
    directory = Path(directory)
    write_mask(directory / f"{BRAIN_SEG}.nii.gz", case.brain_seg)
    write_mask(directory / f"{ARTERY}.nii.gz", case.artery)
    write_mask(directory / f"{VEIN}.nii.gz", case.vein)
    write_affine(directory / TRANSFORM_FILE, case.transform)
    write_world_box(directory / TEMPLATE_CVS_FILE, case.template_cvs_box)
    write_detections(directory / DETECTIONS_FILE, case_id, case.detections)
    write_ground_truth(directory / GROUND_TRUTH_FILE, case_id, case.ground_truth)
    write_json(directory / PLANTED_LABELS_FILE, dict(sorted(case.planted_labels.items())))


# --------------------------------------------------------------------------
# removal logs
# --------------------------------------------------------------------------


def removal_records(case_id: str, result: FilterResult) -> list[dict]:
    out = []
    for d in result.decisions:
        det = d.detection
        out.append(
            {
                "case_id": case_id,
                "detection_id": det.id,
                "method": str(result.method),
                "removed": d.removed,
                "reason": d.reason,
                "profile": d.profile.as_dict(),
                "min_voxel": list(det.box.min),
                "max_voxel": list(det.box.max),
                "confidence": det.confidence,
            }
        )
    return out


def write_removal_log(path, case_id: str, result: FilterResult) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in removal_records(case_id, result)]
    write_text(path, "".join(line + "\n" for line in lines))


def read_removal_log(path) -> list[dict]:
    path = Path(path)
    records = []
    offset = 0
    for lineno, line in enumerate(path.read_text().splitlines(keepends=True), start=1):
        if line.strip():
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ParseError(f"line {lineno}: {exc.msg}", path, offset + exc.pos) from exc
        offset += len(line.encode())
    return records


def filter_result_from_log(records: Sequence[dict], path=None) -> tuple[str, FilterResult]:
    """Rebuild ``(case_id, FilterResult)`` from one method's log records."""
    if not records:
        raise ValidationError(f"{path}: empty removal log")
    problems = []
    case_ids = {r.get("case_id") for r in records}
    methods = {r.get("method") for r in records}
    if len(case_ids) != 1:
        problems.append(f"mixed case ids {sorted(map(str, case_ids))}")
    if len(methods) != 1:
        problems.append(f"mixed methods {sorted(map(str, methods))}")
    if problems:
        raise ValidationError(f"{path}: invalid removal log", problems)
    method = Method.parse(methods.pop())
    decisions = []
    for i, r in enumerate(records):
        try:
            det = Detection(
                r["detection_id"],
                VoxelBox(tuple(r["min_voxel"]), tuple(r["max_voxel"])),
                float(r["confidence"]),
            )
            profile = OverlapProfile(**r["profile"])
            decisions.append(Decision(det, profile, bool(r["removed"]), str(r["reason"])))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"record {i}: {exc}")
    if problems:
        raise ValidationError(f"{path}: invalid removal log", problems)
    return case_ids.pop(), FilterResult(method, tuple(decisions))


# --------------------------------------------------------------------------
# metrics output and run configuration
# --------------------------------------------------------------------------


def metrics_document(case_id: str | None, metrics: Metrics, matching=None) -> dict:
    doc = {"case_id": case_id, **metrics.as_dict()}
    if matching is not None:
        doc["pairs"] = [{"detection_id": d, "ground_truth_id": g, "iou": iou} for d, g, iou in matching.pairs]
        doc["fp_ids"] = list(matching.fp_ids)
        doc["fn_ids"] = list(matching.fn_ids)
    return doc


@dataclass
class RunConfig:
    brain_dilation_mm: float = 3.6
    cvs_expand_mm: float = 3.2
    confidence_threshold: float = 0.8
    brain_uses_expanded_box: bool = True
    methods: tuple[int, ...] = (1, 2, 3, 4, 5)
    iou_threshold: float = 0.3
    m2_min_voxels: int = 1
    invert_transform: bool = False
    output_dir: str = "out"
    workers: int = 0  # 0: one per processor

    def pipeline_params(self) -> PipelineParams:
        return PipelineParams(
            brain_dilation_mm=self.brain_dilation_mm,
            cvs_expand_mm=self.cvs_expand_mm,
            confidence_threshold=self.confidence_threshold,
            brain_uses_expanded_box=self.brain_uses_expanded_box,
        )

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, tuple):
                text = ",".join(str(v) for v in value)
            else:
                text = repr(value) if isinstance(value, float) else str(value)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, path=None) -> "RunConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        problems = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                problems.append(f"line {lineno}: expected 'key = value'")
                continue
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                problems.append(f"line {lineno}: unknown key {key!r}")
                continue
            try:
                values[key] = _parse_config_value(kinds[key], value)
            except ValueError as exc:
                problems.append(f"line {lineno}: {key}: {exc}")
        if problems:
            raise ValidationError(f"{path or 'config'}: invalid configuration", problems)
        cfg = cls(**values)
        cfg.pipeline_params()  # range checks
        for m in cfg.methods:
            Method.parse(m)
        return cfg


def _parse_config_value(kind: str, value: str):
    if kind == "bool":
        low = value.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind == "float":
        return float(value)
    if kind == "int":
        return int(value)
    if kind.startswith("tuple"):
        return tuple(Method.parse(v).value for v in value.split(",") if v.strip())
    return value


def read_config(path) -> RunConfig:
    path = Path(path)
    return RunConfig.from_text(path.read_text(), path)


def write_config(path, cfg: RunConfig) -> None:
    write_text(path, cfg.to_text())
