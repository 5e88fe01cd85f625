"""
Scoring a batch and reading the report
======================================

A detection is a true positive when its center lies inside a ground-truth
box and the IoU is at least 0.3. Matching is one-to-one and greedy by IoU.
Filtered columns reuse the unfiltered matching, so every removed FP shows up
once in the category table and once as a drop in the FP row.
"""
from aneurysm_fp import apply_methods, build_mask_set, build_report, match_detections, threshold_detections
from aneurysm_fp.evaluation import CaseRun, metrics_from_counts, reduction_percentage
from aneurysm_fp.phantom import generate_phantom, standard_phantom_spec

runs = []
for seed in range(10):
    case = generate_phantom(standard_phantom_spec(seed, vein_touching_gt=seed % 2 == 1), seed)
    masks = build_mask_set(case.brain_seg, case.artery, case.vein, case.template_cvs_box, case.transform)
    dets = threshold_detections(case.detections, 0.8)
    runs.append(CaseRun(f"p{seed:03d}", apply_methods(dets, masks), match_detections(dets, case.ground_truth)))

report = build_report(runs)
print(report.to_text())

# the same arithmetic on clinical-scale counts: 126 FPs over 143 scans,
# 37 left after M5
before, after = metrics_from_counts(139, 126, 79, 143), metrics_from_counts(139, 37, 79, 143)
print("FP/case", before.fp_per_case_text, "->", after.fp_per_case_text)
print("reduction", reduction_percentage(126 - 37, 126), "%")
