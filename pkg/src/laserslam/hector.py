"""Odometry-free scan-to-map matching with Gauss-Newton over a map pyramid.

The pose ``xi`` is found by minimising ``sum_i (1 - M(S_i(xi)))**2`` where
``S_i`` are the beam endpoints moved into the world by ``xi`` and ``M`` is
the bilinearly interpolated occupancy probability. Matching runs coarse to
fine so a wide basin at the coarse level hands a good start to the fine one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .geom import Pose2, angular_diff
from .gridmap import MapPyramid, OccupancyGrid, interpolate_many, update_pyramid

MIN_BEAMS = 10
REGULARIZER = 1e-6
MAX_HALVINGS = 5
CONVERGED = np.array([1e-3, 1e-3, math.radians(0.057)])
THROTTLE = (0.005, math.radians(0.2))


class GNStep(NamedTuple):
    delta: Pose2
    residual: float
    hessian: np.ndarray
    gradient: np.ndarray
    singular: bool = False


@dataclass
class MatchDiagnostics:
    iterations: int = 0
    residual: float = float("nan")
    converged: bool = False
    no_match: bool = False
    singular: bool = False


def scan_residuals(grid: OccupancyGrid, pts: np.ndarray, xi: Pose2):
    """Per-endpoint residuals ``1 - M`` and their (N, 3) Jacobian rows dM/dxi."""
    world = xi.transform_points(pts)
    values, g = interpolate_many(grid, grid.world_to_cells(world) - 0.5)
    g = g / grid.resolution
    if grid.origin.yaw != 0.0:
        c, s = math.cos(grid.origin.yaw), math.sin(grid.origin.yaw)
        g = g @ np.array([[c, s], [-s, c]])
    c, s = math.cos(xi.yaw), math.sin(xi.yaw)
    jx = -s * pts[:, 0] - c * pts[:, 1]
    jy = c * pts[:, 0] - s * pts[:, 1]
    rows = np.column_stack((g[:, 0], g[:, 1], g[:, 0] * jx + g[:, 1] * jy))
    return 1.0 - values, rows


def mean_residual(grid: OccupancyGrid, pts: np.ndarray, xi: Pose2) -> float:
    r, _ = scan_residuals(grid, pts, xi)
    return float(np.mean(r * r))


def _points(scan_or_points) -> np.ndarray:
    if hasattr(scan_or_points, "endpoints"):
        return scan_or_points.endpoints()
    return np.asarray(scan_or_points, dtype=float).reshape(-1, 2)


def gauss_newton_step(grid: OccupancyGrid, scan, xi: Pose2, regularizer: float = REGULARIZER) -> GNStep:
    """One Gauss-Newton increment for the endpoint objective at ``xi``."""
    pts = _points(scan)
    r, rows = scan_residuals(grid, pts, xi)
    H = rows.T @ rows
    b = rows.T @ r
    residual = float(np.mean(r * r)) if len(r) else float("nan")
    A = H + regularizer * np.eye(3)
    try:
        delta = np.linalg.solve(A, b)
    except np.linalg.LinAlgError:
        return GNStep(Pose2(), residual, H, b, True)
    if not np.all(np.isfinite(delta)) or np.linalg.cond(A) > 1e14:
        return GNStep(Pose2(), residual, H, b, True)
    return GNStep(Pose2(*delta), residual, H, b, False)


def _add(xi: Pose2, d: np.ndarray) -> Pose2:
    return Pose2(xi.x + d[0], xi.y + d[1], xi.yaw + d[2])


def refine(grid: OccupancyGrid, pts: np.ndarray, xi: Pose2, max_iter: int = 10,
           diag: MatchDiagnostics | None = None) -> Pose2:
    """Damped Gauss-Newton iterations at one resolution; residual never increases."""
    diag = diag if diag is not None else MatchDiagnostics()
    current = mean_residual(grid, pts, xi)
    for _ in range(max_iter):
        step = gauss_newton_step(grid, pts, xi)
        diag.iterations += 1
        if step.singular:
            diag.singular = True
            break
        d = np.array([step.delta.x, step.delta.y, step.delta.yaw])
        for _ in range(MAX_HALVINGS + 1):
            cand = _add(xi, d)
            res = mean_residual(grid, pts, cand)
            if res <= current:
                break
            d = 0.5 * d
        else:
            break
        xi, current = cand, res
        if np.all(np.abs(d) < CONVERGED):
            diag.converged = True
            break
    diag.residual = current
    return xi


@dataclass
class HectorState:
    pyramid: MapPyramid
    pose: Pose2 = field(default_factory=Pose2)
    last_match: MatchDiagnostics = field(default_factory=MatchDiagnostics)
    last_inserted: Pose2 | None = None
    max_iter: int = 10

    @classmethod
    def create(cls, base_resolution: float = 0.05, n_levels: int = 3, size: float = 24.0,
               start: Pose2 = Pose2(), max_iter: int = 10) -> "HectorState":
        return cls(MapPyramid.create(base_resolution, n_levels, size, start), start,
                   max_iter=max_iter)


def match_scan(state: HectorState, scan, init: Pose2 | None = None) -> Pose2:
    """Coarse-to-fine match starting from ``init`` (default: the previous pose)."""
    pts = _points(scan)
    xi = state.pose if init is None else init
    diag = MatchDiagnostics()
    state.last_match = diag
    if len(pts) < MIN_BEAMS:
        diag.no_match = True
        return state.pose
    for grid in reversed(state.pyramid.levels):
        diag.converged = False
        xi = refine(grid, pts, xi, state.max_iter, diag)
    return xi


def process_scan(state: HectorState, scan) -> tuple[Pose2, HectorState]:
    if state.last_inserted is None:
        if scan.n_valid == 0:
            state.last_match = MatchDiagnostics(no_match=True)
            return state.pose, state
        update_pyramid(state.pyramid, state.pose, scan)
        state.last_inserted = state.pose
        state.last_match = MatchDiagnostics(converged=True)
        return state.pose, state
    pose = match_scan(state, scan)
    if state.last_match.no_match:
        return state.pose, state
    state.pose = pose
    last = state.last_inserted
    moved = math.hypot(pose.x - last.x, pose.y - last.y) >= THROTTLE[0] or \
        abs(angular_diff(pose.yaw, last.yaw)) >= THROTTLE[1]
    if moved:
        update_pyramid(state.pyramid, pose, scan)
        state.last_inserted = pose
    return pose, state


class HectorSLAM:
    """Stateful wrapper exposing the common pipeline interface."""

    name = "hector"

    def __init__(self, **kwargs):
        self.state = HectorState.create(**kwargs)

    def process_scan(self, scan) -> Pose2:
        pose, _ = process_scan(self.state, scan)
        return pose

    def final_map(self) -> OccupancyGrid:
        return self.state.pyramid.finest
