"""Planar rigid poses, affine frame transforms and metric grid conventions.

Everything downstream (voxelization, feature warping, RoI extraction,
occupancy aggregation) agrees on one convention: a grid of ``rows x cols``
square cells of side ``resolution`` centered on ``(origin_x, origin_y)``,
with column index increasing along +x and row index increasing along +y.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

TWO_PI = 2.0 * math.pi


class GeometryError(ValueError):
    """Invalid pose, transform or grid parameters."""


def normalize_heading(heading: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    if not math.isfinite(heading):
        raise GeometryError(f"heading must be finite, got {heading!r}")
    h = math.remainder(heading, TWO_PI)
    if h <= -math.pi:
        h += TWO_PI
    return h


def rotation_matrix(angle: float) -> np.ndarray:
    """2x2 rotation matrix. Adding 0.0 scrubs -0.0 so that a zero angle
    yields the exact identity."""
    c = math.cos(angle)
    s = math.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=np.float64) + 0.0


@dataclass(frozen=True)
class Pose2D:
    """Position plus heading in the world (or parent) frame.

    The heading is normalized into (-pi, pi] on construction.
    """

    x: float
    y: float
    heading: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise GeometryError(f"pose position must be finite, got ({self.x}, {self.y})")
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @property
    def xy(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Affine map p -> linear @ p + offset on 2D points."""

    linear: np.ndarray
    offset: np.ndarray

    def __post_init__(self) -> None:
        lin = np.asarray(self.linear, dtype=np.float64)
        off = np.asarray(self.offset, dtype=np.float64)
        if lin.shape != (2, 2):
            raise GeometryError(f"linear block must be 2x2, got {lin.shape}")
        if off.shape != (2,):
            raise GeometryError(f"offset must be a 2-vector, got {off.shape}")
        if not (np.isfinite(lin).all() and np.isfinite(off).all()):
            raise GeometryError("transform entries must be finite")
        object.__setattr__(self, "linear", lin)
        object.__setattr__(self, "offset", off)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(2), np.zeros(2))

    @property
    def determinant(self) -> float:
        return float(np.linalg.det(self.linear))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform points of shape (..., 2)."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.shape[-1] != 2:
            raise GeometryError(f"points must have a trailing axis of size 2, got {pts.shape}")
        return pts @ self.linear.T + self.offset

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """Return self o inner (inner applied first)."""
        return AffineTransform(self.linear @ inner.linear,
                               self.linear @ inner.offset + self.offset)

    def inverse(self) -> "AffineTransform":
        det = self.determinant
        if abs(det) <= 1e-12:
            raise GeometryError(f"transform is singular (|det| = {abs(det):.3e})")
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.offset)


def pose_to_world(pose: Pose2D) -> AffineTransform:
    """Transform taking points in the pose's local frame to the parent frame."""
    return AffineTransform(rotation_matrix(pose.heading), pose.xy)


def relative_transform(src: Pose2D, dst: Pose2D) -> AffineTransform:
    """Transform taking points in src's frame to dst's frame.

    Computed analytically from the pose difference so that
    relative_transform(a, a) has an exact identity rotation block.
    """
    dh = src.heading - dst.heading
    c = math.cos(dst.heading)
    s = math.sin(dst.heading)
    dx = src.x - dst.x
    dy = src.y - dst.y
    # rotate the world-frame displacement back into dst's frame
    offset = np.array([c * dx + s * dy, -s * dx + c * dy], dtype=np.float64) + 0.0
    return AffineTransform(rotation_matrix(dh), offset)


@dataclass(frozen=True)
class GridSpec:
    """Dense 2D grid of square cells, centered on (origin_x, origin_y)."""

    rows: int
    cols: int
    resolution: float
    origin_x: float = 0.0
    origin_y: float = 0.0

    def __post_init__(self) -> None:
        if self.rows < 1 or self.cols < 1:
            raise GeometryError(f"grid must have positive extents, got {self.rows}x{self.cols}")
        if not (self.resolution > 0.0 and math.isfinite(self.resolution)):
            raise GeometryError(f"resolution must be positive, got {self.resolution!r}")

    @property
    def width(self) -> float:
        return self.cols * self.resolution

    @property
    def height(self) -> float:
        return self.rows * self.resolution

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)


def cell_center(grid: GridSpec, row: int, col: int) -> tuple[float, float]:
    """Metric coordinates of a cell center."""
    if not (0 <= row < grid.rows and 0 <= col < grid.cols):
        raise GeometryError(f"cell ({row}, {col}) outside {grid.rows}x{grid.cols} grid")
    x = grid.origin_x + (col + 0.5 - grid.cols / 2.0) * grid.resolution
    y = grid.origin_y + (row + 0.5 - grid.rows / 2.0) * grid.resolution
    return (x, y)


def cell_centers(grid: GridSpec) -> np.ndarray:
    """All cell centers as an array of shape (rows, cols, 2)."""
    cols = (np.arange(grid.cols) + 0.5 - grid.cols / 2.0) * grid.resolution + grid.origin_x
    rows = (np.arange(grid.rows) + 0.5 - grid.rows / 2.0) * grid.resolution + grid.origin_y
    out = np.empty((grid.rows, grid.cols, 2), dtype=np.float64)
    out[:, :, 0] = cols[None, :]
    out[:, :, 1] = rows[:, None]
    return out


def frac_index(grid: GridSpec, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Fractional (row, col) index of metric points; cell centers land on
    exact integers."""
    col = (np.asarray(x, dtype=np.float64) - grid.origin_x) / grid.resolution + grid.cols / 2.0 - 0.5
    row = (np.asarray(y, dtype=np.float64) - grid.origin_y) / grid.resolution + grid.rows / 2.0 - 0.5
    return row, col


def point_to_cell(grid: GridSpec, x: float, y: float) -> tuple[int, int] | None:
    """Cell containing a metric point, or None when outside the grid."""
    col = math.floor((x - grid.origin_x) / grid.resolution + grid.cols / 2.0)
    row = math.floor((y - grid.origin_y) / grid.resolution + grid.rows / 2.0)
    if 0 <= row < grid.rows and 0 <= col < grid.cols:
        return (row, col)
    return None


@dataclass(frozen=True)
class RotatedBox:
    """Axis-oblique rectangle: center, heading and metric extents.

    extent_x spans the box's local +x (heading) direction, extent_y the
    lateral direction.
    """

    center_x: float
    center_y: float
    heading: float
    extent_x: float
    extent_y: float

    def __post_init__(self) -> None:
        if not (self.extent_x > 0.0 and self.extent_y > 0.0):
            raise GeometryError(
                f"box extents must be positive, got ({self.extent_x}, {self.extent_y})")
        object.__setattr__(self, "heading", normalize_heading(self.heading))

    @property
    def pose(self) -> Pose2D:
        return Pose2D(self.center_x, self.center_y, self.heading)
