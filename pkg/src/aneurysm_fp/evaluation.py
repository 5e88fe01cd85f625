"""Detection matching, TP/FP/FN metrics, FP categorisation and reports.

A filtered column is scored by restricting the unfiltered ("None") matching
to the detections that survived. Re-matching after filtering could let a
lower-ranked duplicate inherit a removed detection's ground truth, which
would break the bookkeeping identity ``FP(None) = FP(method) + removed FPs``.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

from .errors import InvalidArgumentError, ValidationError
from .filtering import Detection, FilterResult, Method, OverlapProfile, overlap_profile
from .masks import MaskSet, PipelineParams
from .volume import VoxelBox

DEFAULT_IOU_THRESHOLD = 0.3


@dataclass(frozen=True)
class GroundTruthBox:
    id: str
    box: VoxelBox
    extra: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if self.box.is_empty:
            raise InvalidArgumentError(f"ground-truth box {self.id!r} is empty")


@dataclass(frozen=True)
class Matching:
    pairs: tuple[tuple[str, str, float], ...]
    fp_ids: tuple[str, ...]
    fn_ids: tuple[str, ...]

    @property
    def tp(self) -> int:
        return len(self.pairs)

    @property
    def fp(self) -> int:
        return len(self.fp_ids)

    @property
    def fn(self) -> int:
        return len(self.fn_ids)

    @property
    def matched_detection_ids(self) -> set[str]:
        return {d for d, _, _ in self.pairs}

    def restrict(self, kept_ids) -> "Matching":
        """Drop removed detections; ground truth they matched becomes FN."""
        kept_ids = set(kept_ids)
        pairs = tuple(p for p in self.pairs if p[0] in kept_ids)
        lost = tuple(g for d, g, _ in self.pairs if d not in kept_ids)
        return Matching(
            pairs=pairs,
            fp_ids=tuple(d for d in self.fp_ids if d in kept_ids),
            fn_ids=self.fn_ids + lost,
        )


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    n_cases: int
    fp_per_case: float
    sensitivity: float
    # False when there is no ground truth at all (sensitivity reported as 0)
    sensitivity_defined: bool = True

    @property
    def fp_per_case_text(self) -> str:
        return format_fixed(self.fp_per_case, 2)

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "n_cases": self.n_cases,
            "fp_per_case": self.fp_per_case,
            "fp_per_case_rounded": float(self.fp_per_case_text),
            "sensitivity": self.sensitivity,
            "sensitivity_defined": self.sensitivity_defined,
        }


class FpCategory(enum.Enum):
    EXTRACRANIAL = "extracranial"
    VENOUS = "venous"
    CVS = "cvs"
    ARTERIAL = "arterial"
    NONVASCULAR = "nonvascular"

    def __str__(self):
        return self.value


def round_half_up(x: float, places: int) -> float:
    return float(Decimal(repr(x)).quantize(Decimal(1).scaleb(-places), rounding=ROUND_HALF_UP))


def format_fixed(x: float, places: int) -> str:
    return f"{round_half_up(x, places):.{places}f}"


# --------------------------------------------------------------------------
# matching and metrics
# --------------------------------------------------------------------------


def box_iou(a: VoxelBox, b: VoxelBox) -> float:
    if a.is_empty or b.is_empty:
        raise InvalidArgumentError("IoU is undefined for an empty box")
    inter = a.intersection(b).volume
    return inter / (a.volume + b.volume - inter)


def _check_unique(ids, what):
    dupes = sorted(k for k, n in Counter(ids).items() if n > 1)
    if dupes:
        raise ValidationError(f"duplicate {what} ids", [repr(d) for d in dupes])


def admissible(det: Detection, gt: GroundTruthBox, iou_threshold: float) -> tuple[bool, float]:
    """TP test: the detection's center lies in the GT box and IoU clears the bar."""
    iou = box_iou(det.box, gt.box)
    return gt.box.contains_point(det.box.center) and iou >= iou_threshold, iou


def match_detections(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruthBox],
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> Matching:
    """Greedy one-to-one matching in descending IoU order.

    Ties break on detection id, then ground-truth id, lexicographically.
    Extra detections on an already matched aneurysm count as FP.
    """
    if not (math.isfinite(iou_threshold) and 0.0 <= iou_threshold <= 1.0):
        raise InvalidArgumentError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    _check_unique([d.id for d in dets], "detection")
    _check_unique([g.id for g in gts], "ground-truth")

    candidates = []
    for det in dets:
        for gt in gts:
            ok, iou = admissible(det, gt, iou_threshold)
            if ok:
                candidates.append((-iou, det.id, gt.id))
    candidates.sort()

    used_d, used_g, pairs = set(), set(), []
    for neg_iou, did, gid in candidates:
        if did in used_d or gid in used_g:
            continue
        used_d.add(did)
        used_g.add(gid)
        pairs.append((did, gid, -neg_iou))
    return Matching(
        pairs=tuple(pairs),
        fp_ids=tuple(d.id for d in dets if d.id not in used_d),
        fn_ids=tuple(g.id for g in gts if g.id not in used_g),
    )


def compute_metrics(matchings: Sequence[Matching], n_cases: int | None = None) -> Metrics:
    if n_cases is None:
        n_cases = len(matchings)
    if n_cases < 1:
        raise InvalidArgumentError("n_cases must be >= 1")
    tp = sum(m.tp for m in matchings)
    fp = sum(m.fp for m in matchings)
    fn = sum(m.fn for m in matchings)
    return metrics_from_counts(tp, fp, fn, n_cases)


def metrics_from_counts(tp: int, fp: int, fn: int, n_cases: int) -> Metrics:
    if n_cases < 1:
        raise InvalidArgumentError("n_cases must be >= 1")
    if min(tp, fp, fn) < 0:
        raise InvalidArgumentError("counts must be non-negative")
    defined = tp + fn > 0
    return Metrics(
        tp=tp,
        fp=fp,
        fn=fn,
        n_cases=n_cases,
        fp_per_case=fp / n_cases,
        sensitivity=tp / (tp + fn) if defined else 0.0,
        sensitivity_defined=defined,
    )


def reduction_percentage(removed: int, total_fp: int) -> float | None:
    """Percent of FPs removed, rounded half-up to 0.1; ``None`` when there were none."""
    if removed < 0 or total_fp < 0:
        raise InvalidArgumentError("counts must be non-negative")
    if total_fp == 0:
        return None
    if removed > total_fp:
        raise InvalidArgumentError(f"removed ({removed}) exceeds total FP ({total_fp})")
    return round_half_up(100.0 * removed / total_fp, 1)


# --------------------------------------------------------------------------
# FP categories
# --------------------------------------------------------------------------


def categorize_profile(p: OverlapProfile) -> FpCategory:
    if p.brain == 0:
        return FpCategory.EXTRACRANIAL
    if p.cvs >= 1 and p.cvs >= max(p.vein, p.artery):
        return FpCategory.CVS
    if p.vein > p.artery:
        return FpCategory.VENOUS
    if p.artery >= 1:
        return FpCategory.ARTERIAL
    return FpCategory.NONVASCULAR


def categorize_fp(box: VoxelBox, masks: MaskSet) -> FpCategory:
    return categorize_profile(overlap_profile(box, masks))


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------


@dataclass
class CaseRun:
    """Everything the report needs about one case."""

    case_id: str
    results: Mapping[Method, FilterResult]
    matching: Matching


@dataclass
class Report:
    columns: list[str]
    detection: dict[str, Metrics]
    # category -> {"All FPs": n, "M1": removed, ...}
    categories: dict[str, dict[str, int]]
    removed: dict[str, int]
    reduction: dict[str, float | None]
    extracranial_fraction: dict[str, float | None]
    audit: list[tuple[str, bool, str]]
    params: dict

    @property
    def consistent(self) -> bool:
        return all(ok for _, ok, _ in self.audit)

    def detection_rows(self) -> list[list[str]]:
        rows = [["", *self.columns]]
        rows.append(["TP", *(str(self.detection[c].tp) for c in self.columns)])
        rows.append(
            [
                "FP (FP/case)",
                *(f"{self.detection[c].fp} ({self.detection[c].fp_per_case_text})" for c in self.columns),
            ]
        )
        rows.append(["FN", *(str(self.detection[c].fn) for c in self.columns)])
        return rows

    def category_rows(self) -> list[list[str]]:
        methods = self.columns[1:]
        rows = [["Category", "All FPs", *methods]]
        for name, counts in self.categories.items():
            rows.append([name, str(counts["All FPs"]), *(str(counts[m]) for m in methods)])
        return rows

    def summary_rows(self) -> list[list[str]]:
        rows = [["Method", "FP removed", "Reduction %"]]
        for m in self.columns[1:]:
            pct = self.reduction[m]
            rows.append([m, str(self.removed[m]), "n/a" if pct is None else f"{pct:.1f}%"])
        return rows

    def to_text(self) -> str:
        def table(rows):
            widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
            return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows)

        parts = [
            "Detection results",
            table(self.detection_rows()),
            "",
            "False positives by category (All FPs / removed by method)",
            table(self.category_rows()),
            "",
            "FP reduction",
            table(self.summary_rows()),
            "",
            "Extracranial FP fraction: "
            + ", ".join(
                f"{k}={'n/a' if v is None else format_fixed(100 * v, 1) + '%'}"
                for k, v in self.extracranial_fraction.items()
            ),
            "",
            "Consistency checks",
            *(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail}" for name, ok, detail in self.audit),
        ]
        return "\n".join(parts) + "\n"

    def to_csv(self, which: str = "detection") -> str:
        rows = {
            "detection": self.detection_rows,
            "categories": self.category_rows,
            "summary": self.summary_rows,
        }[which]()
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return buf.getvalue()

    def as_dict(self) -> dict:
        return {
            "columns": self.columns,
            "detection": {c: m.as_dict() for c, m in self.detection.items()},
            "categories": self.categories,
            "removed": self.removed,
            "reduction_percent": self.reduction,
            "extracranial_fraction": self.extracranial_fraction,
            "audit": [{"check": n, "passed": ok, "detail": d} for n, ok, d in self.audit],
            "params": self.params,
        }


def build_report(
    cases: Sequence[CaseRun],
    params: PipelineParams | None = None,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
) -> Report:
    """Assemble the detection table and the FP-category table for a batch of cases.

    Every case must carry results for the same set of methods, every method's
    result must cover the same detections, and the case's matching must be
    over exactly those detections.
    """
    if not cases:
        raise ValidationError("cannot build a report from zero cases")
    case_ids = [c.case_id for c in cases]
    _check_unique(case_ids, "case")

    method_sets = {frozenset(c.results) for c in cases}
    if len(method_sets) != 1:
        raise ValidationError(
            "cases disagree on the set of methods",
            [f"{c.case_id}: {sorted(str(m) for m in c.results)}" for c in cases],
        )
    methods = sorted(next(iter(method_sets)), key=lambda m: m.value)
    if not methods:
        raise ValidationError("cases carry no filter results")
    columns = ["None", *(str(m) for m in methods)]

    problems = []
    for c in cases:
        matched = [d for d, _, _ in c.matching.pairs] + list(c.matching.fp_ids)
        expected = sorted(matched)
        for m, r in c.results.items():
            ids = sorted(d.detection.id for d in r.decisions)
            if ids != expected:
                problems.append(f"{c.case_id}/{m}: detection ids differ from the matching")
            if r.method is not m:
                problems.append(f"{c.case_id}: result filed under {m} was produced by {r.method}")
    if problems:
        raise ValidationError("inconsistent case data", problems)

    n_cases = len(cases)
    detection = {"None": compute_metrics([c.matching for c in cases], n_cases)}
    for m in methods:
        detection[str(m)] = compute_metrics(
            [c.matching.restrict(c.results[m].kept_ids) for c in cases], n_cases
        )

    # FP categories from the unfiltered FP set; profiles are identical across
    # methods so any one result carries them
    category_names = [str(cat) for cat in FpCategory]
    cat_counts = {name: Counter() for name in category_names}
    for c in cases:
        fp_ids = set(c.matching.fp_ids)
        by_id = {d.detection.id: d for d in c.results[methods[0]].decisions}
        for did in fp_ids:
            cat = str(categorize_profile(by_id[did].profile))
            cat_counts[cat]["All FPs"] += 1
            for m in methods:
                if did in c.results[m].removed_ids:
                    cat_counts[cat][str(m)] += 1

    categories = {}
    for name in category_names:
        categories[name] = {"All FPs": cat_counts[name]["All FPs"], **{str(m): cat_counts[name][str(m)] for m in methods}}
    keys = ["All FPs", *(str(m) for m in methods)]
    total = {k: sum(categories[n][k] for n in category_names) for k in keys}
    extra = {k: categories[str(FpCategory.EXTRACRANIAL)][k] for k in keys}
    intra = {k: total[k] - extra[k] for k in keys}
    categories["Total"] = total
    categories["Intracranial"] = intra
    categories["Extracranial"] = extra

    fp_none = detection["None"].fp
    removed = {str(m): fp_none - detection[str(m)].fp for m in methods}
    reduction = {k: reduction_percentage(v, fp_none) for k, v in removed.items()}

    n_extra = extra["All FPs"]
    extracranial_fraction = {
        "of_all_fp": n_extra / fp_none if fp_none else None,
        "over_intracranial_fp": n_extra / intra["All FPs"] if intra["All FPs"] else None,
    }

    audit = []
    n_gt = detection["None"].tp + detection["None"].fn
    bad = [c for c in columns if detection[c].tp + detection[c].fn != n_gt]
    audit.append(("tp_plus_fn_constant", not bad, f"TP+FN={n_gt} in every column" if not bad else f"differs in {bad}"))
    bad = [str(m) for m in methods if total[str(m)] != removed[str(m)]]
    audit.append(
        (
            "removed_matches_fp_drop",
            not bad,
            "category removals equal FP(None) - FP(method)" if not bad else f"mismatch in {bad}",
        )
    )
    audit.append(
        (
            "category_total_matches_fp",
            total["All FPs"] == fp_none,
            f"{total['All FPs']} categorized vs {fp_none} FP",
        )
    )
    for combo, parts in ((Method.M4, (Method.M1, Method.M2)), (Method.M5, (Method.M1, Method.M3))):
        if combo in methods and all(p in methods for p in parts):
            ok = all(
                c.results[combo].removed_ids
                == c.results[parts[0]].removed_ids | c.results[parts[1]].removed_ids
                for c in cases
            )
            audit.append((f"{combo}_is_{parts[0]}_or_{parts[1]}", ok, "removed-id sets compose"))

    params = params or PipelineParams()
    return Report(
        columns=columns,
        detection=detection,
        categories=categories,
        removed=removed,
        reduction=reduction,
        extracranial_fraction=extracranial_fraction,
        audit=audit,
        params={
            "brain_dilation_mm": params.brain_dilation_mm,
            "cvs_expand_mm": params.cvs_expand_mm,
            "confidence_threshold": params.confidence_threshold,
            "iou_threshold": iou_threshold,
            "n_cases": n_cases,
        },
    )
