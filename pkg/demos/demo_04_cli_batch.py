"""
Running the command-line pipeline
=================================

The same steps as the library demos, driven through ``aneurysm-fp`` on case
directories. Each call below is the in-process equivalent of a shell command,
printed before it runs.
"""
import json
import shlex
import sys
import tempfile
from pathlib import Path

from aneurysm_fp import io as fio
from aneurysm_fp.cli import main
from aneurysm_fp.phantom import STANDARD_TEMPLATE_CVS_BOX


def run(*argv):
    print("$ aneurysm-fp", shlex.join(argv))
    rc = main(list(argv))
    if rc:
        sys.exit(rc)


work = Path(tempfile.mkdtemp(prefix="aneurysm-fp-"))
print("working in", work)

# three synthetic case directories
cases = []
for seed in range(3):
    spec = work / f"spec{seed}.json"
    spec.write_text(json.dumps({"standard": {"layout_seed": seed}}))
    root = work / "cases" / f"p{seed:03d}"
    run("phantom", "--spec", str(spec), "--seed", str(seed), "--out", str(root))
    cases.append(root)

template = work / "template_cvs.json"
fio.write_world_box(template, STANDARD_TEMPLATE_CVS_BOX)
case_args = [a for c in cases for a in ("--case", str(c))]

# {case_id} and {method} expand per case and per method
run("build-masks", *case_args, "--template-cvs", str(template), "--out", str(work / "masks" / "{case_id}"))
for m in ("M1", "M2", "M3", "M4", "M5"):
    run(
        "filter", *case_args, "--method", m,
        "--masks", str(work / "masks" / "{case_id}"),
        "--out", str(work / "filtered" / "{case_id}" / "{method}.json"),
        "--log", str(work / "runs" / "{case_id}" / "{method}.jsonl"),
    )

run("evaluate", "--pred", str(work / "filtered" / "p000" / "M5.json"),
    "--truth", str(cases[0] / "ground_truth.json"), "--out", str(work / "p000_M5.csv"))
print((work / "p000_M5.csv").read_text())

run("report", "--runs", *(str(work / "runs" / c.name) for c in cases),
    "--truth", str(work / "cases" / "{case_id}" / "ground_truth.json"), "--out", str(work / "report"))
