"""Network input construction: sweep occupancy tensors and map rasters."""
from dataclasses import dataclass

import numpy as np
import shapely

from .geometry import GridSpec, cell_centers
from .grid import GridTensor


class VoxelError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelConfig:
    """Input tensor layout: grid, height slabs and sweep count.

    Points with only (x, y, t) columns land in slab 0; a fourth column is
    read as height and binned into slabs of slab_height metres starting
    at z = 0.
    """

    grid: GridSpec
    depth_slabs: int = 1
    n_sweep: int = 3
    slab_height: float = 0.2

    def __post_init__(self) -> None:
        if self.depth_slabs < 1:
            raise VoxelError("need at least one height slab")
        if self.n_sweep < 1:
            raise VoxelError("need at least one sweep")
        if self.slab_height <= 0:
            raise VoxelError("slab height must be positive")

    @property
    def channels(self) -> int:
        return self.depth_slabs * self.n_sweep


def bin_points(grid: GridSpec, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized cell binning; returns rows, cols and an in-bounds mask."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, points.shape[-1])
    col = np.floor((pts[:, 0] - grid.origin_x) / grid.resolution + grid.cols / 2.0)
    row = np.floor((pts[:, 1] - grid.origin_y) / grid.resolution + grid.rows / 2.0)
    ok = (row >= 0) & (row < grid.rows) & (col >= 0) & (col < grid.cols)
    return row.astype(np.int64), col.astype(np.int64), ok


def voxelize_sweeps(sweeps: list[np.ndarray], config: VoxelConfig) -> GridTensor:
    """Binary occupancy tensor, channel = sweep index * slabs + slab.

    Sweeps arrive oldest first and must match the configured count.
    Points outside the grid or the slab stack are ignored.
    """
    if len(sweeps) != config.n_sweep:
        raise VoxelError(f"expected {config.n_sweep} sweeps, got {len(sweeps)}")
    g = config.grid
    out = np.zeros((config.channels, g.rows, g.cols))
    for s, sweep in enumerate(sweeps):
        pts = np.asarray(sweep, dtype=np.float64)
        if pts.size == 0:
            continue
        if pts.ndim != 2 or pts.shape[1] < 2:
            raise VoxelError(f"sweep {s}: points must be rows of at least (x, y)")
        rows, cols, ok = bin_points(g, pts)
        if pts.shape[1] >= 4:
            slab = np.floor(pts[:, 3] / config.slab_height).astype(np.int64)
            ok = ok & (slab >= 0) & (slab < config.depth_slabs)
            slab = np.clip(slab, 0, config.depth_slabs - 1)
        else:
            slab = np.zeros(len(pts), dtype=np.int64)
        out[s * config.depth_slabs + slab[ok], rows[ok], cols[ok]] = 1.0
    return GridTensor(out)


def rasterize_map(layers: list[list[np.ndarray]], grid: GridSpec) -> GridTensor:
    """Binary channel per layer: 1 where the cell center lies in any polygon.

    Polygon boundaries count as inside. Polygons must be simple.
    """
    centers = cell_centers(grid)
    points = shapely.points(centers[..., 0].ravel(), centers[..., 1].ravel())
    out = np.zeros((len(layers), grid.rows, grid.cols))
    for c, layer in enumerate(layers):
        hit = np.zeros(points.shape[0], dtype=bool)
        for verts in layer:
            poly = shapely.Polygon(np.asarray(verts, dtype=np.float64))
            if not poly.is_valid:
                raise VoxelError(f"layer {c}: polygon is not simple")
            hit |= shapely.covers(poly, points)
        out[c] = hit.reshape(grid.rows, grid.cols)
    return GridTensor(out)


def rasterize_disks(centers: np.ndarray, radius: float, grid: GridSpec) -> np.ndarray:
    """Binary mask of cells a disk overlaps.

    Overlap semantics (distance from the disk center to the cell rectangle
    at most radius), so a disk smaller than a cell still marks the cell it
    sits in.
    """
    if radius <= 0:
        raise VoxelError("disk radius must be positive")
    pts = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    cc = cell_centers(grid)
    half = grid.resolution / 2.0
    out = np.zeros((grid.rows, grid.cols), dtype=bool)
    for p in pts:
        # nearest point of each cell rectangle to the disk center
        nx = np.clip(p[0], cc[..., 0] - half, cc[..., 0] + half)
        ny = np.clip(p[1], cc[..., 1] - half, cc[..., 1] + half)
        d2 = (nx - p[0]) ** 2 + (ny - p[1]) ** 2
        out |= d2 <= radius * radius
    return out.astype(np.float64)
