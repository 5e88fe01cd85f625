"""Grid geometry, binary masks, box arithmetic and box/mask overlap counting.

Conventions used throughout the package:

* Arrays are indexed ``[i, j, k]`` with shape ``(nx, ny, nz)``, the same
  order as the NIfTI on-disk layout exposed by nibabel.
* A :class:`VoxelBox` is half-open: ``min`` inclusive, ``max`` exclusive.
* Continuous index space treats voxel ``k`` as the cell ``[k, k + 1)``.
  World coordinates are ``index_to_world @ (x, y, z, 1)`` of a continuous
  index point.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import GeometryMismatchError, InvalidArgumentError, InvalidTransformError

GEOMETRY_RTOL = 1e-4
GEOMETRY_ATOL = 1e-6
# index coordinates within this distance of an integer are snapped before
# floor/ceil so that float noise from affine round trips cannot add a voxel
INDEX_SNAP = 1e-6


def _triple(values, kind=float, name="value") -> tuple:
    try:
        out = tuple(kind(v) for v in values)
    except TypeError as exc:
        raise InvalidArgumentError(f"{name} must be a triple, got {values!r}") from exc
    if len(out) != 3:
        raise InvalidArgumentError(f"{name} must have 3 components, got {len(out)}")
    return out


# --------------------------------------------------------------------------
# transforms and grids
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Affine4:
    """A 4x4 homogeneous affine matrix (last row ``0 0 0 1``)."""

    m: np.ndarray

    def __post_init__(self):
        m = np.array(self.m, dtype=float)
        if m.shape != (4, 4):
            raise InvalidTransformError(f"affine must be 4x4, got shape {m.shape}")
        if not np.all(np.isfinite(m)):
            raise InvalidTransformError("affine contains non-finite entries")
        if not np.allclose(m[3], [0.0, 0.0, 0.0, 1.0], rtol=0.0, atol=1e-9):
            raise InvalidTransformError(f"affine last row must be (0, 0, 0, 1), got {tuple(m[3])}")
        det = float(np.linalg.det(m[:3, :3]))
        if abs(det) <= 1e-12:
            raise InvalidTransformError(f"affine is singular (|det| = {abs(det):.3g})")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> "Affine4":
        return cls(np.eye(4))

    @classmethod
    def from_translation(cls, offset) -> "Affine4":
        m = np.eye(4)
        m[:3, 3] = _triple(offset, name="offset")
        return cls(m)

    @classmethod
    def from_scaling(cls, spacing, origin=(0.0, 0.0, 0.0)) -> "Affine4":
        m = np.diag([*_triple(spacing, name="spacing"), 1.0])
        m[:3, 3] = _triple(origin, name="origin")
        return cls(m)

    def inverse(self) -> "Affine4":
        return Affine4(np.linalg.inv(self.m))

    def compose(self, other: "Affine4") -> "Affine4":
        """``self @ other``: apply ``other`` first."""
        return Affine4(self.m @ other.m)

    def apply(self, points) -> np.ndarray:
        """Transform an ``(n, 3)`` (or ``(3,)``) array of points."""
        pts = np.asarray(points, dtype=float)
        return pts @ self.m[:3, :3].T + self.m[:3, 3]

    def allclose(self, other: "Affine4", rtol=GEOMETRY_RTOL, atol=GEOMETRY_ATOL) -> bool:
        return bool(np.allclose(self.m, other.m, rtol=rtol, atol=atol))

    def __eq__(self, other):
        if not isinstance(other, Affine4):
            return NotImplemented
        return bool(np.array_equal(self.m, other.m))

    def __hash__(self):
        return hash(self.m.tobytes())

    def __repr__(self):
        rows = "; ".join(" ".join(f"{v:g}" for v in row) for row in self.m)
        return f"Affine4([{rows}])"


@dataclass(frozen=True, eq=False)
class Grid:
    """Sampling geometry shared by a volume and every mask derived from it."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    index_to_world: Affine4 = None

    def __post_init__(self):
        dims = _triple(self.dims, int, "dims")
        spacing = _triple(self.spacing_mm, float, "spacing_mm")
        if min(dims) < 1:
            raise InvalidArgumentError(f"all dims must be >= 1, got {dims}")
        if not all(math.isfinite(s) and s > 0 for s in spacing):
            raise InvalidArgumentError(f"all spacing components must be > 0, got {spacing}")
        affine = self.index_to_world
        if affine is None:
            affine = Affine4.from_scaling(spacing)
        elif not isinstance(affine, Affine4):
            affine = Affine4(affine)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing_mm", spacing)
        object.__setattr__(self, "index_to_world", affine)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.dims

    @property
    def size(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def full_box(self) -> "VoxelBox":
        return VoxelBox((0, 0, 0), self.dims)

    def matches(self, other: "Grid") -> bool:
        """Dims exactly equal; spacing and affine within relative 1e-4."""
        return (
            self.dims == other.dims
            and np.allclose(self.spacing_mm, other.spacing_mm, rtol=GEOMETRY_RTOL, atol=GEOMETRY_ATOL)
            and self.index_to_world.allclose(other.index_to_world)
        )

    def __eq__(self, other):
        if not isinstance(other, Grid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.spacing_mm == other.spacing_mm
            and self.index_to_world == other.index_to_world
        )

    def __hash__(self):
        return hash((self.dims, self.spacing_mm, self.index_to_world))

    def __repr__(self):
        return f"Grid(dims={self.dims}, spacing_mm={self.spacing_mm}, index_to_world={self.index_to_world!r})"


def require_same_grid(*grids: Grid) -> Grid:
    first = grids[0]
    for other in grids[1:]:
        if not first.matches(other):
            raise GeometryMismatchError(f"grids differ: {first!r} vs {other!r}")
    return first


def _frozen(arr: np.ndarray) -> np.ndarray:
    view = arr.view()
    view.setflags(write=False)
    return view


@dataclass(frozen=True, eq=False)
class Volume3D:
    grid: Grid
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.shape != self.grid.dims:
            raise InvalidArgumentError(
                f"data shape {data.shape} does not match grid dims {self.grid.dims}"
            )
        object.__setattr__(self, "data", _frozen(data))

    @property
    def dims(self):
        return self.grid.dims

    @property
    def spacing_mm(self):
        return self.grid.spacing_mm

    @property
    def index_to_world(self) -> Affine4:
        return self.grid.index_to_world

    def to_mask(self, threshold: float = 0.5) -> "BinaryMask":
        return BinaryMask(self.grid, self.data > threshold)


@dataclass(frozen=True, eq=False)
class BinaryMask:
    """Boolean occupancy on a :class:`Grid`. Read-only once constructed."""

    grid: Grid
    occupancy: np.ndarray

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.dtype != np.bool_:
            occ = occ.astype(bool)
        if occ.shape != self.grid.dims:
            raise InvalidArgumentError(
                f"occupancy shape {occ.shape} does not match grid dims {self.grid.dims}"
            )
        object.__setattr__(self, "occupancy", _frozen(occ))

    @classmethod
    def empty(cls, grid: Grid) -> "BinaryMask":
        return cls(grid, np.zeros(grid.dims, dtype=bool))

    @classmethod
    def full(cls, grid: Grid) -> "BinaryMask":
        return cls(grid, np.ones(grid.dims, dtype=bool))

    @classmethod
    def from_box(cls, grid: Grid, box: "VoxelBox") -> "BinaryMask":
        occ = np.zeros(grid.dims, dtype=bool)
        clipped = box.clip(grid.dims)
        if not clipped.is_empty:
            occ[clipped.slices] = True
        return cls(grid, occ)

    def count(self) -> int:
        return int(np.count_nonzero(self.occupancy))

    def __eq__(self, other):
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.grid.matches(other.grid) and bool(np.array_equal(self.occupancy, other.occupancy))

    __hash__ = None

    def __repr__(self):
        return f"BinaryMask(dims={self.grid.dims}, count={self.count()})"


# --------------------------------------------------------------------------
# boxes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VoxelBox:
    """Half-open integer box. Every empty box normalizes to ``VoxelBox.EMPTY``."""

    min: tuple[int, int, int]
    max: tuple[int, int, int]

    def __post_init__(self):
        lo = _triple(self.min, _as_int, "min")
        hi = _triple(self.max, _as_int, "max")
        if any(h <= l for l, h in zip(lo, hi)):
            lo = hi = (0, 0, 0)
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @classmethod
    def empty(cls) -> "VoxelBox":
        return cls((0, 0, 0), (0, 0, 0))

    @classmethod
    def from_center_size(cls, center, size) -> "VoxelBox":
        """Box of integer ``size`` whose continuous center is nearest ``center``."""
        c = _triple(center, name="center")
        s = _triple(size, _as_int, "size")
        lo = tuple(int(math.floor(ci - si / 2.0 + 0.5)) for ci, si in zip(c, s))
        return cls(lo, tuple(l + si for l, si in zip(lo, s)))

    @property
    def is_empty(self) -> bool:
        return self.min == self.max

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.min, self.max))

    @property
    def volume(self) -> int:
        a, b, c = self.shape
        return a * b * c

    @property
    def center(self) -> tuple[float, float, float]:
        """Continuous index-space center."""
        return tuple((l + h) / 2.0 for l, h in zip(self.min, self.max))

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(l, h) for l, h in zip(self.min, self.max))

    def intersection(self, other: "VoxelBox") -> "VoxelBox":
        return VoxelBox(
            tuple(max(a, b) for a, b in zip(self.min, other.min)),
            tuple(min(a, b) for a, b in zip(self.max, other.max)),
        )

    def clip(self, dims) -> "VoxelBox":
        return self.intersection(VoxelBox((0, 0, 0), tuple(dims)))

    def expand(self, radius) -> "VoxelBox":
        r = _triple(radius, _as_int, "radius") if np.ndim(radius) else (int(radius),) * 3
        if self.is_empty:
            return self
        return VoxelBox(
            tuple(l - ri for l, ri in zip(self.min, r)),
            tuple(h + ri for h, ri in zip(self.max, r)),
        )

    def contains_point(self, point) -> bool:
        """Closed containment of a continuous index-space point."""
        if self.is_empty:
            return False
        return all(l <= p <= h for l, p, h in zip(self.min, point, self.max))

    def to_world(self, grid: Grid) -> "WorldBox":
        return transform_world_box(grid.index_to_world, WorldBox(self.min, self.max))


def _as_int(v) -> int:
    if isinstance(v, (bool, np.bool_)):
        raise TypeError("bool is not an index")
    iv = int(v)
    if iv != v:
        raise InvalidArgumentError(f"box corner {v!r} is not an integer")
    return iv


@dataclass(frozen=True)
class WorldBox:
    """Axis-aligned box in millimetres."""

    min_mm: tuple[float, float, float]
    max_mm: tuple[float, float, float]

    def __post_init__(self):
        lo = _triple(self.min_mm, name="min_mm")
        hi = _triple(self.max_mm, name="max_mm")
        if not all(math.isfinite(v) for v in lo + hi):
            raise InvalidArgumentError("world box corners must be finite")
        if any(h < l for l, h in zip(lo, hi)):
            raise InvalidArgumentError(f"world box min {lo} exceeds max {hi}")
        object.__setattr__(self, "min_mm", lo)
        object.__setattr__(self, "max_mm", hi)

    @property
    def extent(self) -> tuple[float, float, float]:
        return tuple(h - l for l, h in zip(self.min_mm, self.max_mm))

    @property
    def volume(self) -> float:
        a, b, c = self.extent
        return a * b * c

    def corners(self) -> np.ndarray:
        """The 8 corners as an ``(8, 3)`` array."""
        return np.array(list(itertools.product(*zip(self.min_mm, self.max_mm))), dtype=float)

    def contains(self, other: "WorldBox", tol: float = 1e-9) -> bool:
        return all(a <= b + tol for a, b in zip(self.min_mm, other.min_mm)) and all(
            a + tol >= b for a, b in zip(self.max_mm, other.max_mm)
        )

    def intersection(self, other: "WorldBox") -> "WorldBox | None":
        lo = tuple(max(a, b) for a, b in zip(self.min_mm, other.min_mm))
        hi = tuple(min(a, b) for a, b in zip(self.max_mm, other.max_mm))
        if any(h < l for l, h in zip(lo, hi)):
            return None
        return WorldBox(lo, hi)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def mm_to_voxel_radius(spacing_mm, radius_mm: float) -> tuple[int, int, int]:
    """Per-axis voxel radius covering ``radius_mm``: ``ceil(radius / spacing)``.

    The quotient is rounded to 9 decimals first so 3.6 mm on a 0.4 mm grid is
    9 voxels rather than 10.
    """
    spacing = _triple(spacing_mm, name="spacing_mm")
    if not math.isfinite(radius_mm) or radius_mm < 0:
        raise InvalidArgumentError(f"radius_mm must be >= 0, got {radius_mm}")
    if any(s <= 0 for s in spacing):
        raise InvalidArgumentError(f"spacing must be > 0, got {spacing}")
    return tuple(int(math.ceil(round(radius_mm / s, 9))) for s in spacing)


def dilate_mask(mask: BinaryMask, radius_mm: float) -> BinaryMask:
    """Dilate with an axis-aligned box element of per-axis radius ``mm_to_voxel_radius``.

    Implemented as three running-maximum passes, so cost is independent of the
    radius. Out-of-grid voxels count as unset.
    """
    radius = mm_to_voxel_radius(mask.grid.spacing_mm, radius_mm)
    if radius == (0, 0, 0):
        return mask
    # uint8 view, no copy; maximum_filter1d allocates the result
    out = mask.occupancy.view(np.uint8)
    for axis, r in enumerate(radius):
        if r == 0:
            continue
        out = ndimage.maximum_filter1d(out, size=2 * r + 1, axis=axis, mode="constant", cval=0)
    return BinaryMask(mask.grid, out.view(bool))


_BOOLEAN_OPS = {
    "union": np.logical_or,
    "intersect": np.logical_and,
    "subtract": lambda a, b: np.logical_and(a, np.logical_not(b)),
}


def mask_boolean(a: BinaryMask, b: BinaryMask, op: str) -> BinaryMask:
    try:
        fn = _BOOLEAN_OPS[op]
    except KeyError:
        raise InvalidArgumentError(
            f"unknown boolean op {op!r}; expected one of {sorted(_BOOLEAN_OPS)}"
        ) from None
    require_same_grid(a.grid, b.grid)
    return BinaryMask(a.grid, fn(a.occupancy, b.occupancy))


def box_mask_overlap(box: VoxelBox, mask: BinaryMask) -> int:
    """Number of set voxels of ``mask`` whose index lies in ``box``."""
    clipped = box.clip(mask.grid.dims)
    if clipped.is_empty:
        return 0
    return int(np.count_nonzero(mask.occupancy[clipped.slices]))


def transform_world_box(t: Affine4, box: WorldBox) -> WorldBox:
    """Axis-aligned bounds of the 8 transformed corners."""
    if not isinstance(t, Affine4):
        t = Affine4(t)
    pts = t.apply(box.corners())
    return WorldBox(tuple(pts.min(axis=0)), tuple(pts.max(axis=0)))


def expand_world_box(box: WorldBox, margin_mm: float) -> WorldBox:
    if not math.isfinite(margin_mm) or margin_mm < 0:
        raise InvalidArgumentError(f"margin_mm must be >= 0, got {margin_mm}")
    return WorldBox(
        tuple(v - margin_mm for v in box.min_mm),
        tuple(v + margin_mm for v in box.max_mm),
    )


def _snap(x: np.ndarray) -> np.ndarray:
    r = np.round(x)
    return np.where(np.abs(x - r) < INDEX_SNAP, r, x)


def voxelize_world_box(box: WorldBox, grid: Grid) -> VoxelBox:
    """Smallest voxel box whose cells cover ``box``, clipped to the grid.

    Corners go to continuous index space through the inverse affine; the
    index-space bounds are rounded outward (floor of the minimum, ceil of the
    maximum, which is already exclusive under the cell convention).
    """
    pts = grid.index_to_world.inverse().apply(box.corners())
    lo = _snap(pts.min(axis=0))
    hi = _snap(pts.max(axis=0))
    vmin = np.floor(lo).astype(np.int64)
    vmax = np.ceil(hi).astype(np.int64)
    # a zero-thickness box on an integer plane still touches one cell
    vmax = np.maximum(vmax, vmin + 1)
    return VoxelBox(tuple(int(v) for v in vmin), tuple(int(v) for v in vmax)).clip(grid.dims)


def world_to_index(grid: Grid, points) -> np.ndarray:
    return grid.index_to_world.inverse().apply(points)


def index_to_world(grid: Grid, points) -> np.ndarray:
    return grid.index_to_world.apply(points)
