import sys

import numpy as np
import pytest
from hypothesis import strategies as st

from aneurysm_fp.masks import build_mask_set
from aneurysm_fp.phantom import generate_phantom, standard_phantom_spec
from aneurysm_fp.volume import BinaryMask, Grid, VoxelBox


def random_mask(rng, dims, spacing=(1.0, 1.0, 1.0), density=None):
    density = rng.uniform(0.0, 0.3) if density is None else density
    return BinaryMask(Grid(dims, spacing), rng.random(dims) < density)


def random_box(rng, dims, overhang=4):
    """Random box that may poke outside the grid or miss it entirely."""
    lo = [int(rng.integers(-overhang, d + overhang)) for d in dims]
    hi = [l + int(rng.integers(0, d + 1)) for l, d in zip(lo, dims)]
    return VoxelBox(tuple(lo), tuple(hi))


@st.composite
def masks(draw, max_side=8):
    dims = tuple(draw(st.integers(1, max_side)) for _ in range(3))
    seed = draw(st.integers(0, 2**32 - 1))
    density = draw(st.floats(0.0, 0.5))
    rng = np.random.default_rng(seed)
    return BinaryMask(Grid(dims, (1.0, 1.0, 1.0)), rng.random(dims) < density)


@st.composite
def voxel_boxes(draw, lo=-4, hi=20):
    a = [draw(st.integers(lo, hi)) for _ in range(3)]
    b = [x + draw(st.integers(1, 10)) for x in a]
    return VoxelBox(tuple(a), tuple(b))


@pytest.fixture(scope="session")
def phantom_cases():
    """20 standard phantoms; odd layout seeds carry a vein-touching aneurysm."""
    out = []
    for seed in range(20):
        spec = standard_phantom_spec(seed, vein_touching_gt=seed % 2 == 1)
        case = generate_phantom(spec, seed)
        masks = build_mask_set(case.brain_seg, case.artery, case.vein, case.template_cvs_box, case.transform)
        out.append((spec, case, masks))
    return out


@pytest.fixture(scope="session")
def phantom(phantom_cases):
    return phantom_cases[0]


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
