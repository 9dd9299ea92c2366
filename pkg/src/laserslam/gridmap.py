"""Log-odds occupancy grids, bilinear map access, pyramids and submaps.

Cells are stored row-major as ``logodds[iy, ix]``. Two continuous
coordinate frames are used:

* *map coordinates* (:func:`world_to_map`): the corner of cell (0, 0) is at
  (0, 0), so cell ``(ix, iy)`` spans ``[ix, ix+1) x [iy, iy+1)``;
* *lattice coordinates* (:func:`interpolate`): the value of cell
  ``(ix, iy)`` sits exactly at ``(ix, iy)``. Lattice = map - 0.5.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Pose2, compose, inverse

L_HIT = math.log(0.7 / 0.3)
L_MISS = math.log(0.4 / 0.6)
L_MIN = -4.0
L_MAX = 4.0

HIT = True
MISS = False


def logodds_to_prob(l):
    return 1.0 / (1.0 + np.exp(-np.asarray(l, dtype=float)))


class OccupancyGrid:
    """Fixed-size log-odds grid anchored at a world pose."""

    def __init__(self, width: int, height: int, resolution: float,
                 origin: Pose2 = Pose2()):
        if resolution <= 0:
            raise ValueError("resolution must be positive")
        if width <= 0 or height <= 0:
            raise ValueError("grid dimensions must be positive")
        self.width = int(width)
        self.height = int(height)
        self.resolution = float(resolution)
        self.origin = origin
        self.logodds = np.zeros((self.height, self.width))
        self.dropped_updates = 0
        self._prob = None

    @classmethod
    def centered(cls, size: float, resolution: float, center: Pose2 = Pose2()) -> "OccupancyGrid":
        """Square grid of side ``size`` meters around ``center`` (axis aligned).

        Cell centres fall on the resolution lattice through ``center`` so
        the start pose sits in the middle of a cell and surfaces at whole
        multiples of the resolution do not straddle a cell boundary.
        """
        n = int(round(size / resolution))
        half = 0.5 * n * resolution + 0.5 * resolution
        return cls(n, n, resolution, Pose2(center.x - half, center.y - half, 0.0))

    def copy(self) -> "OccupancyGrid":
        g = OccupancyGrid.__new__(OccupancyGrid)
        g.width, g.height, g.resolution, g.origin = self.width, self.height, self.resolution, self.origin
        g.logodds = self.logodds.copy()
        g.dropped_updates = self.dropped_updates
        g._prob = None if self._prob is None else self._prob
        return g

    @property
    def probabilities(self) -> np.ndarray:
        if self._prob is None:
            self._prob = logodds_to_prob(self.logodds)
        return self._prob

    def touch(self):
        """Invalidate cached probabilities after editing ``logodds`` directly."""
        self._prob = None

    def in_bounds(self, ix, iy):
        ix, iy = np.asarray(ix), np.asarray(iy)
        return (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)

    def world_to_cells(self, pts: np.ndarray) -> np.ndarray:
        """Vectorised :func:`world_to_map` for (N, 2) world points."""
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        o = self.origin
        if o.yaw != 0.0:
            pts = inverse(o).transform_points(pts)
            return pts / self.resolution
        return np.column_stack(((pts[:, 0] - o.x) / self.resolution,
                                (pts[:, 1] - o.y) / self.resolution))

    def cell_center(self, ix: int, iy: int) -> np.ndarray:
        local = np.array([[(ix + 0.5) * self.resolution, (iy + 0.5) * self.resolution]])
        return self.origin.transform_points(local)[0]

    def fingerprint(self) -> bytes:
        return self.logodds.tobytes()


def world_to_map(grid: OccupancyGrid, p) -> tuple[float, float, bool]:
    """Continuous map coordinates of world point ``p`` and whether it lies in the grid."""
    c = grid.world_to_cells(np.asarray(p, dtype=float))[0]
    inside = 0.0 <= c[0] < grid.width and 0.0 <= c[1] < grid.height
    return float(c[0]), float(c[1]), bool(inside)


def interpolate_many(grid: OccupancyGrid, coords: np.ndarray):
    """Bilinear occupancy probability and its gradient at lattice coordinates.

    Returns ``(values, grads)`` with shapes (N,) and (N, 2); gradients are
    per cell. Queries whose 2x2 neighbourhood leaves the grid read 0.5 with
    zero gradient.
    """
    coords = np.asarray(coords, dtype=float).reshape(-1, 2)
    n = len(coords)
    values = np.full(n, 0.5)
    grads = np.zeros((n, 2))
    fl = np.floor(coords)
    ix = fl[:, 0].astype(np.int64)
    iy = fl[:, 1].astype(np.int64)
    ok = (ix >= 0) & (iy >= 0) & (ix + 1 < grid.width) & (iy + 1 < grid.height)
    if not np.any(ok):
        return values, grads
    ix, iy = ix[ok], iy[ok]
    fx = coords[ok, 0] - fl[ok, 0]
    fy = coords[ok, 1] - fl[ok, 1]
    P = grid.probabilities
    m00 = P[iy, ix]
    m10 = P[iy, ix + 1]
    m01 = P[iy + 1, ix]
    m11 = P[iy + 1, ix + 1]
    values[ok] = (1 - fy) * ((1 - fx) * m00 + fx * m10) + fy * ((1 - fx) * m01 + fx * m11)
    grads[ok, 0] = (1 - fy) * (m10 - m00) + fy * (m11 - m01)
    grads[ok, 1] = (1 - fx) * (m01 - m00) + fx * (m11 - m10)
    return values, grads


def interpolate(grid: OccupancyGrid, p) -> tuple[float, np.ndarray]:
    """Single-point :func:`interpolate_many`."""
    v, g = interpolate_many(grid, np.asarray(p, dtype=float).reshape(1, 2))
    return float(v[0]), g[0]


def update_cell(grid: OccupancyGrid, cell, observation: bool) -> OccupancyGrid:
    ix, iy = int(cell[0]), int(cell[1])
    if not (0 <= ix < grid.width and 0 <= iy < grid.height):
        grid.dropped_updates += 1
        return grid
    l = grid.logodds[iy, ix] + (L_HIT if observation else L_MISS)
    grid.logodds[iy, ix] = min(L_MAX, max(L_MIN, l))
    grid.touch()
    return grid


def trace_rays(start, ends: np.ndarray) -> np.ndarray:
    """Integer Bresenham traversal from cell ``start`` to each cell in ``ends``.

    Returns an (M, 2) array of every traversed cell, start included and the
    end cells excluded. Uses the symmetric integer form of Bresenham's line:
    along the major axis every step advances one cell and the minor axis
    coordinate is ``round(i * d_minor / d_major)`` with halves rounded up.
    """
    ends = np.asarray(ends, dtype=np.int64).reshape(-1, 2)
    if len(ends) == 0:
        return np.empty((0, 2), dtype=np.int64)
    x0, y0 = int(start[0]), int(start[1])
    dx = ends[:, 0] - x0
    dy = ends[:, 1] - y0
    steps = np.maximum(np.abs(dx), np.abs(dy))
    nmax = int(steps.max())
    if nmax == 0:
        return np.empty((0, 2), dtype=np.int64)
    i = np.arange(nmax, dtype=np.int64)[None, :]
    keep = i < steps[:, None]
    denom = np.maximum(steps, 1)[:, None]
    # floor((2*i*d + n) / (2n)) == round-half-up(i*d/n), exact in integers
    xs = x0 + np.floor_divide(2 * i * dx[:, None] + denom, 2 * denom)
    ys = y0 + np.floor_divide(2 * i * dy[:, None] + denom, 2 * denom)
    return np.column_stack((xs[keep], ys[keep]))


def _apply_observations(grid: OccupancyGrid, hit_cells: np.ndarray, miss_cells: np.ndarray):
    """Each distinct cell gets at most one update per scan; hits win over misses."""
    w = grid.width
    dropped = 0
    flat = {}
    for name, cells in (("hit", hit_cells), ("miss", miss_cells)):
        if len(cells):
            ok = grid.in_bounds(cells[:, 0], cells[:, 1])
            dropped += int(np.count_nonzero(~ok))
            flat[name] = np.unique(cells[ok, 1] * w + cells[ok, 0])
        else:
            flat[name] = np.empty(0, dtype=np.int64)
    misses = np.setdiff1d(flat["miss"], flat["hit"], assume_unique=True)
    lo = grid.logodds.reshape(-1)
    lo[flat["hit"]] += L_HIT
    lo[misses] += L_MISS
    np.clip(lo, L_MIN, L_MAX, out=lo)
    grid.dropped_updates += dropped
    grid.touch()


def insert_scan(grid: OccupancyGrid, pose: Pose2, scan) -> OccupancyGrid:
    """Integrate one scan taken at world ``pose``: endpoint hits, ray misses."""
    local = scan.endpoints()
    if len(local) == 0:
        return grid
    world = pose.transform_points(local)
    sensor = np.floor(grid.world_to_cells(np.array([pose.x, pose.y]))[0]).astype(np.int64)
    ends = np.floor(grid.world_to_cells(world)).astype(np.int64)
    _apply_observations(grid, ends, trace_rays(sensor, ends))
    return grid


@dataclass
class MapPyramid:
    """Stack of grids over the same extent with resolution doubling per level."""

    levels: list

    @classmethod
    def create(cls, base_resolution: float = 0.05, n_levels: int = 3,
               size: float = 24.0, center: Pose2 = Pose2()) -> "MapPyramid":
        if n_levels < 1:
            raise ValueError("a pyramid needs at least one level")
        return cls([OccupancyGrid.centered(size, base_resolution * 2 ** k, center)
                    for k in range(n_levels)])

    @property
    def finest(self) -> OccupancyGrid:
        return self.levels[0]

    def __len__(self):
        return len(self.levels)


def update_pyramid(pyr: MapPyramid, pose: Pose2, scan) -> MapPyramid:
    for grid in pyr.levels:
        insert_scan(grid, pose, scan)
    return pyr


class SubmapFinishedError(RuntimeError):
    pass


@dataclass
class Submap:
    """Locally consistent grid in its own frame, anchored at ``origin_global``.

    The grid lives in submap-local coordinates so moving the anchor during
    pose-graph optimization never touches cell contents.
    """

    grid: OccupancyGrid
    origin_global: Pose2
    finish_threshold: int = 90
    state: str = "active"
    scans_inserted: int = 0
    id: int = 0
    members: list = field(default_factory=list)

    @classmethod
    def create(cls, origin_global: Pose2, size: float = 24.0, resolution: float = 0.05,
               finish_threshold: int = 90, id: int = 0) -> "Submap":
        return cls(OccupancyGrid.centered(size, resolution), origin_global,
                   finish_threshold=finish_threshold, id=id)

    @property
    def finished(self) -> bool:
        return self.state == "finished"

    def to_local(self, pose_global: Pose2) -> Pose2:
        return compose(inverse(self.origin_global), pose_global)

    def to_global(self, pose_local: Pose2) -> Pose2:
        return compose(self.origin_global, pose_local)

    def insert(self, pose_local: Pose2, scan) -> None:
        if self.finished:
            raise SubmapFinishedError(f"submap {self.id} is finished")
        insert_scan(self.grid, pose_local, scan)
        self.scans_inserted += 1
        if self.scans_inserted >= self.finish_threshold:
            self.state = "finished"


def export_pgm(grid: OccupancyGrid, path) -> tuple[Path, Path]:
    """Write a plain (P2) graymap plus a ``.txt`` metadata sidecar.

    Pixel value = round(255 * occupancy probability); the top image row is
    the highest-y grid row.
    """
    path = Path(path)
    pix = np.rint(grid.probabilities * 255).astype(int)[::-1]
    lines = ["P2", f"{grid.width} {grid.height}", "255"]
    lines += [" ".join(map(str, row)) for row in pix]
    path.write_text("\n".join(lines) + "\n")
    meta = path.with_suffix(".txt")
    meta.write_text(
        f"image: {path.name}\n"
        f"resolution: {grid.resolution:.6f}\n"
        f"origin: {grid.origin.x:.6f} {grid.origin.y:.6f} {grid.origin.yaw:.6f}\n"
        f"width: {grid.width}\nheight: {grid.height}\n")
    return path, meta
