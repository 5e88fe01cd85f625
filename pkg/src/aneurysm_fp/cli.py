"""Command-line interface.

Exit status: 0 on success, 1 on validation errors, 2 on I/O or parse errors.
Set ``ANEURYSM_FP_LOG_LEVEL`` (e.g. ``INFO``, ``DEBUG``) for more output.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import io as fio
from .errors import ParseError, ValidationError
from .evaluation import CaseRun, build_report, compute_metrics, match_detections
from .filtering import Method, apply_method, threshold_detections
from .masks import build_mask_set
from .phantom import PhantomSpec, generate_phantom, standard_phantom_spec

logger = logging.getLogger("aneurysm_fp")

LOG_ENV = "ANEURYSM_FP_LOG_LEVEL"


def _config(args) -> fio.RunConfig:
    cfg = fio.read_config(args.config) if getattr(args, "config", None) else fio.RunConfig()
    overrides = {
        "brain_dilation_mm": "brain_dilation_mm",
        "cvs_expand_mm": "cvs_expand_mm",
        "confidence_threshold": "confidence_threshold",
        "iou": "iou_threshold",
        "m2_min_voxels": "m2_min_voxels",
        "workers": "workers",
    }
    for arg, key in overrides.items():
        value = getattr(args, arg, None)
        if value is not None:
            setattr(cfg, key, value)
    if getattr(args, "invert", False):
        cfg.invert_transform = True
    if getattr(args, "unexpanded_brain_box", False):
        cfg.brain_uses_expanded_box = False
    cfg.pipeline_params()
    return cfg


def _map(fn, items, workers: int):
    items = list(items)
    workers = workers or os.cpu_count() or 1
    if workers <= 1 or len(items) <= 1:
        return [fn(*it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, *zip(*items)))


def _target(pattern: str, case_id: str, many: bool, suffix: str = "", method=None) -> Path:
    """Expand ``{case_id}`` / ``{method}`` in an output path.

    Without a ``{case_id}`` placeholder a multi-case run writes
    ``<pattern>/<case_id><suffix>`` instead.
    """
    text = pattern.replace("{case_id}", case_id)
    if method is not None:
        text = text.replace("{method}", str(method))
    if many and "{case_id}" not in pattern:
        return Path(text) / f"{case_id}{suffix}"
    return Path(text)


# --------------------------------------------------------------------------
# build-masks
# --------------------------------------------------------------------------


def _build_one(case_root, template_path, cfg, out_dir):
    case = fio.CaseDirectory.open(case_root)
    brain_seg, artery, vein = case.load_masks()
    masks = build_mask_set(
        brain_seg,
        artery,
        vein,
        fio.read_world_box(template_path),
        case.load_transform(cfg.invert_transform),
        cfg.pipeline_params(),
    )
    fio.write_mask_set(out_dir, masks)
    logger.info("%s: cvs_region_box %s, cvs voxels %d", case.case_id, masks.cvs_region_box, masks.cvs.count())
    return case.case_id


def cmd_build_masks(args) -> int:
    cfg = _config(args)
    many = len(args.case) > 1
    jobs = []
    for root in args.case:
        case_id = Path(root).resolve().name
        jobs.append((root, args.template_cvs, cfg, _target(args.out, case_id, many)))
    _map(_build_one, jobs, cfg.workers)
    return 0


# --------------------------------------------------------------------------
# filter
# --------------------------------------------------------------------------


def _filter_one(case_root, masks_dir, method, cfg, out_path, log_path):
    case = fio.CaseDirectory.open(case_root)
    dets = threshold_detections(case.load_detections(), cfg.confidence_threshold)
    masks = fio.read_mask_set(masks_dir)
    result = apply_method(dets, masks, method, cfg.m2_min_voxels)
    fio.write_detections(out_path, case.case_id, result.kept, {"method": str(method)})
    if log_path is not None:
        fio.write_removal_log(log_path, case.case_id, result)
    logger.info("%s %s: kept %d, removed %d", case.case_id, method, len(result.kept), len(result.removed))
    return case.case_id


def cmd_filter(args) -> int:
    cfg = _config(args)
    method = Method.parse(args.method)
    many = len(args.case) > 1
    jobs = []
    for root in args.case:
        case_id = Path(root).resolve().name
        jobs.append(
            (
                root,
                _target(args.masks, case_id, many),
                method,
                cfg,
                _target(args.out, case_id, many, ".json", method),
                None if args.log is None else _target(args.log, case_id, many, ".jsonl", method),
            )
        )
    _map(_filter_one, jobs, cfg.workers)
    return 0


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    pred = fio.read_detections(args.pred)
    truth = fio.read_ground_truth(args.truth)
    if pred.case_id != truth.case_id:
        logger.warning("case ids differ: pred %r, truth %r", pred.case_id, truth.case_id)
    matching = match_detections(pred.detections, truth.detections, cfg.iou_threshold)
    metrics = compute_metrics([matching], 1)
    out = Path(args.out)
    if out.suffix == ".csv":
        header = ["case_id", "tp", "fp", "fn", "n_cases", "fp_per_case", "sensitivity"]
        row = [truth.case_id, metrics.tp, metrics.fp, metrics.fn, 1, metrics.fp_per_case_text, f"{metrics.sensitivity:.4f}"]
        fio.write_text(out, ",".join(header) + "\n" + ",".join(map(str, row)) + "\n")
    else:
        fio.write_json(out, fio.metrics_document(truth.case_id, metrics, matching))
    return 0


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def load_run(run_dir, iou_threshold: float, truth_pattern: str | None = None) -> CaseRun:
    """Read one case's per-method removal logs and its ground truth.

    The ground truth is ``run_dir/ground_truth.json`` unless ``truth_pattern``
    (which may contain ``{case_id}``) says otherwise.
    """
    run_dir = Path(run_dir)
    logs = sorted(run_dir.glob("*.jsonl"))
    if not logs:
        raise FileNotFoundError(f"{run_dir}: no removal logs (*.jsonl)")
    results, case_ids = {}, set()
    for path in logs:
        case_id, result = fio.filter_result_from_log(fio.read_removal_log(path), path)
        case_ids.add(case_id)
        if result.method in results:
            raise ValidationError(f"{run_dir}: more than one log for {result.method}")
        results[result.method] = result
    if len(case_ids) != 1:
        raise ValidationError(f"{run_dir}: logs disagree on case_id", sorted(case_ids))
    case_id = case_ids.pop()
    truth_path = run_dir / fio.GROUND_TRUTH_FILE if truth_pattern is None else Path(truth_pattern.replace("{case_id}", case_id))
    truth = fio.read_ground_truth(truth_path)
    if truth.case_id != case_id:
        raise ValidationError(f"{truth_path}: case_id {truth.case_id!r} differs from the logs' {case_id!r}")
    dets = [d.detection for d in next(iter(results.values())).decisions]
    matching = match_detections(dets, truth.detections, iou_threshold)
    return CaseRun(truth.case_id, results, matching)


def cmd_report(args) -> int:
    cfg = _config(args)
    cases = _map(load_run, [(r, cfg.iou_threshold, args.truth) for r in args.runs], cfg.workers)
    report = build_report(cases, cfg.pipeline_params(), cfg.iou_threshold)
    sys.stdout.write(report.to_text())
    if args.out:
        out = Path(args.out)
        fio.write_json(out / "report.json", report.as_dict())
        fio.write_text(out / "detection_table.csv", report.to_csv("detection"))
        fio.write_text(out / "fp_categories.csv", report.to_csv("categories"))
        fio.write_text(out / "fp_reduction.csv", report.to_csv("summary"))
    if not report.consistent:
        logger.error("report failed internal consistency checks")
        return 1
    return 0


# --------------------------------------------------------------------------
# phantom
# --------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    doc = fio.read_json(args.spec)
    if isinstance(doc, dict) and "standard" in doc:
        opts = dict(doc["standard"] or {})
        opts.setdefault("layout_seed", args.seed)
        spec = standard_phantom_spec(**opts)
    else:
        spec = PhantomSpec.from_dict(doc)
    case = generate_phantom(spec, args.seed)
    out = Path(args.out)
    fio.write_case(out, out.resolve().name, case)
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aneurysm-fp",
        description="Anatomy-based false-positive removal for aneurysm detections.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--workers", type=int, help="worker processes (default: one per CPU)")

    p = sub.add_parser("build-masks", help="derive brain / vein_final / CVS masks for a case")
    p.add_argument("--case", action="append", required=True, help="case directory (repeatable)")
    p.add_argument("--template-cvs", required=True, help="template CVS box JSON (template world mm)")
    p.add_argument("--brain-dilation-mm", type=float)
    p.add_argument("--cvs-expand-mm", type=float)
    p.add_argument("--invert", action="store_true", help="invert the case transform before use")
    p.add_argument("--unexpanded-brain-box", action="store_true", help="add the unexpanded CVS box to the brain mask")
    p.add_argument("--out", required=True, help="output directory, may contain {case_id}")
    common(p)
    p.set_defaults(func=cmd_build_masks)

    p = sub.add_parser("filter", help="apply one post-processing method")
    p.add_argument("--case", action="append", required=True)
    p.add_argument("--masks", required=True, help="mask directory written by build-masks, may contain {case_id}")
    p.add_argument("--method", required=True, choices=["1", "2", "3", "4", "5", "M1", "M2", "M3", "M4", "M5"])
    p.add_argument("--confidence-threshold", type=float)
    p.add_argument("--m2-min-voxels", type=int)
    p.add_argument("--out", required=True, help="filtered detections JSON, may contain {case_id} and {method}")
    p.add_argument("--log", help="line-delimited removal log, may contain {case_id} and {method}")
    common(p)
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("evaluate", help="match detections to ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--iou", type=float)
    p.add_argument("--out", required=True, help="metrics file (.json or .csv)")
    common(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate removal logs into detection and FP-category tables")
    p.add_argument("--runs", nargs="+", required=True, help="run directories, one per case, holding the *.jsonl logs")
    p.add_argument("--truth", help="ground-truth path, may contain {case_id} (default: <run>/ground_truth.json)")
    p.add_argument("--iou", type=float)
    p.add_argument("--out", help="also write JSON and CSV tables here")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("phantom", help="write a synthetic case directory")
    p.add_argument("--spec", required=True, help='phantom spec JSON, or {"standard": {...}}')
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(
        level=getattr(logging, os.environ.get(LOG_ENV, "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
