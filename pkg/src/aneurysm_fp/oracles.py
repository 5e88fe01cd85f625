"""Brute-force reference implementations.

These are deliberately naive and share no code with the fast paths in
:mod:`aneurysm_fp.volume`: no slicing tricks, no separable passes, no early
exits. They exist to be obviously correct, not fast.
"""
from __future__ import annotations

import math

import numpy as np


def oracle_box_overlap(box, mask) -> int:
    """Triple loop over the grid-clipped box counting set voxels."""
    occ = mask.occupancy.tolist()
    nx, ny, nz = mask.grid.dims
    (x0, y0, z0), (x1, y1, z1) = box.min, box.max
    count = 0
    for i in range(max(x0, 0), min(x1, nx)):
        plane = occ[i]
        for j in range(max(y0, 0), min(y1, ny)):
            row = plane[j]
            for k in range(max(z0, 0), min(z1, nz)):
                if row[k]:
                    count += 1
    return count


def oracle_radius(spacing_mm, radius_mm) -> tuple[int, int, int]:
    return tuple(int(math.ceil(round(radius_mm / s, 9))) for s in spacing_mm)


def oracle_dilate(mask, radius_mm):
    """Per output voxel, scan its whole box neighbourhood. Returns a bool array."""
    occ = np.asarray(mask.occupancy)
    nx, ny, nz = occ.shape
    rx, ry, rz = oracle_radius(mask.grid.spacing_mm, radius_mm)
    out = np.zeros_like(occ, dtype=bool)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                hood = occ[
                    max(i - rx, 0) : i + rx + 1,
                    max(j - ry, 0) : j + ry + 1,
                    max(k - rz, 0) : k + rz + 1,
                ]
                out[i, j, k] = hood.any()
    return out


def oracle_boolean(a, b, op: str) -> np.ndarray:
    """Voxel-by-voxel boolean combination."""
    x = a.occupancy.tolist()
    y = b.occupancy.tolist()
    nx, ny, nz = a.occupancy.shape
    out = np.zeros((nx, ny, nz), dtype=bool)
    for i in range(nx):
        for j in range(ny):
            for k in range(nz):
                p, q = x[i][j][k], y[i][j][k]
                if op == "union":
                    v = p or q
                elif op == "intersect":
                    v = p and q
                elif op == "subtract":
                    v = p and not q
                else:
                    raise ValueError(op)
                out[i, j, k] = v
    return out


def oracle_iou(a, b) -> float:
    """Set IoU by enumerating voxel indices."""
    sa = {
        (i, j, k)
        for i in range(a.min[0], a.max[0])
        for j in range(a.min[1], a.max[1])
        for k in range(a.min[2], a.max[2])
    }
    sb = {
        (i, j, k)
        for i in range(b.min[0], b.max[0])
        for j in range(b.min[1], b.max[1])
        for k in range(b.min[2], b.max[2])
    }
    union = sa | sb
    return len(sa & sb) / len(union) if union else 0.0
