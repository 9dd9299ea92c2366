"""Rao-Blackwellized particle filter grid SLAM with adaptive resampling.

Each particle carries a pose hypothesis and its own occupancy grid. A
platform without wheel odometry has no motion measurement, so the
prediction step replays the last filter estimate's pose delta (a
constant-velocity surrogate) and diffuses it with Gaussian noise. The
proposal is then sharpened by a few Gauss-Newton steps against each
particle's map before weighting.

The filter only runs on every ``k``-th scan and holds its estimate in
between, which produces the lagging, stair-stepped output seen from
slow-updating grid filters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geom import Pose2, between, compose
from .gridmap import OccupancyGrid, insert_scan
from .hector import MIN_BEAMS, refine, mean_residual

N_PARTICLES = 30
BETA = 50.0
RESAMPLE_FRACTION = 0.5
CADENCE = 3
MAP_RESOLUTION = 0.10


@dataclass(frozen=True)
class MotionNoise:
    """Per-update diffusion; stds grow linearly with the increment size.

    Translation noise scales with distance travelled per ``reference_distance``;
    yaw noise additionally scales with rotation per ``reference_rotation``.
    """

    sigma_xy: float = 0.05
    sigma_yaw: float = math.radians(2.0)
    reference_distance: float = 0.07
    reference_rotation: float = 0.03

    def stds(self, motion: Pose2) -> np.ndarray:
        trans = math.hypot(motion.x, motion.y) / self.reference_distance
        rot = abs(motion.yaw) / self.reference_rotation
        return np.array([self.sigma_xy * trans, self.sigma_xy * trans,
                         self.sigma_yaw * (trans + rot)])


ZERO_NOISE = MotionNoise(0.0, 0.0)


@dataclass
class Particle:
    pose: Pose2
    weight: float
    map: OccupancyGrid
    history: list = field(default_factory=list)

    def copy(self) -> "Particle":
        return Particle(self.pose, self.weight, self.map.copy(), list(self.history))


@dataclass
class ParticleSet:
    particles: list
    n_eff: float = 0.0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    degenerate: bool = False
    resampled: bool = False

    @classmethod
    def create(cls, count: int = N_PARTICLES, seed: int = 0, start: Pose2 = Pose2(),
               resolution: float = MAP_RESOLUTION, size: float = 24.0) -> "ParticleSet":
        template = OccupancyGrid.centered(size, resolution, start)
        ps = [Particle(start, 1.0 / count, template.copy()) for _ in range(count)]
        s = cls(ps, rng=np.random.default_rng(seed))
        s.n_eff = n_eff(s.weights)
        return s

    @property
    def weights(self) -> np.ndarray:
        return np.array([p.weight for p in self.particles])

    def set_weights(self, w: np.ndarray):
        for p, wi in zip(self.particles, w):
            p.weight = float(wi)
        self.n_eff = n_eff(w)

    def __len__(self):
        return len(self.particles)


def n_eff(weights) -> float:
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w * w))


def predict(pset: ParticleSet, motion: Pose2, noise: MotionNoise = MotionNoise()) -> ParticleSet:
    draws = pset.rng.standard_normal((len(pset), 3))
    std = noise.stds(motion)
    for p, d in zip(pset.particles, draws * std):
        p.pose = compose(compose(p.pose, motion), Pose2(*d))
    return pset


def refine_and_weight(pset: ParticleSet, scan, beta: float = BETA, iterations: int = 10) -> ParticleSet:
    pts = scan.endpoints() if hasattr(scan, "endpoints") else np.asarray(scan)
    logw = np.log(np.maximum(pset.weights, 1e-300))
    if len(pts) >= MIN_BEAMS:
        for i, p in enumerate(pset.particles):
            p.pose = refine(p.map, pts, p.pose, max_iter=iterations)
            logw[i] -= beta * mean_residual(p.map, pts, p.pose)
    w = np.exp(logw - logw.max()) if np.all(np.isfinite(logw)) else np.zeros(len(pset))
    total = w.sum()
    if not np.isfinite(total) or total <= 0:
        pset.degenerate = True
        w = np.full(len(pset), 1.0 / len(pset))
    else:
        pset.degenerate = False
        w = w / total
    pset.set_weights(w)
    return pset


def systematic_indices(weights: np.ndarray, u0: float) -> np.ndarray:
    """Low-variance resampling: one uniform offset, N evenly spaced pointers."""
    n = len(weights)
    positions = (u0 + np.arange(n)) / n
    cum = np.cumsum(weights)
    cum[-1] = 1.0
    return np.searchsorted(cum, positions, side="right")


def adaptive_resample(pset: ParticleSet, threshold_fraction: float = RESAMPLE_FRACTION) -> ParticleSet:
    """Resample only when the effective sample size has collapsed."""
    pset.n_eff = n_eff(pset.weights)
    pset.resampled = False
    if pset.n_eff >= threshold_fraction * len(pset):
        return pset
    idx = systematic_indices(pset.weights, pset.rng.uniform())
    pset.particles = [pset.particles[i].copy() for i in idx]
    pset.set_weights(np.full(len(pset), 1.0 / len(pset)))
    pset.resampled = True
    return pset


def estimate(pset: ParticleSet) -> Pose2:
    # argmax returns the first maximum: ties go to the lowest index
    return pset.particles[int(np.argmax(pset.weights))].pose


@dataclass
class RBPFState:
    pset: ParticleSet
    cadence: int = CADENCE
    noise: MotionNoise = MotionNoise()
    beta: float = BETA
    threshold_fraction: float = RESAMPLE_FRACTION
    scans_seen: int = 0
    updates: int = 0
    pose: Pose2 = field(default_factory=Pose2)
    motion: Pose2 = field(default_factory=Pose2)
    motion_dt: float = 0.0
    last_update: float = 0.0
    n_eff_log: list = field(default_factory=list)

    @classmethod
    def create(cls, count: int = N_PARTICLES, seed: int = 0, cadence: int = CADENCE,
               noise: MotionNoise = MotionNoise(), **kwargs) -> "RBPFState":
        return cls(ParticleSet.create(count, seed), cadence, noise, **kwargs)


def _scaled(motion: Pose2, factor: float) -> Pose2:
    return Pose2(motion.x * factor, motion.y * factor, motion.yaw * factor)


def process_scan(state: RBPFState, scan) -> tuple[Pose2, RBPFState]:
    """Update the filter on the second scan and then every ``cadence``-th scan.

    Between updates the previous estimate is held. The motion fed to
    :func:`predict` is the last estimate delta rescaled to the time elapsed
    since the previous update.
    """
    pset = state.pset
    index = state.scans_seen
    state.scans_seen += 1
    if index == 0:
        for p in pset.particles:
            insert_scan(p.map, p.pose, scan)
            p.history.append((scan.timestamp, p.pose))
        state.pose = estimate(pset)
        state.last_update = scan.timestamp
        return state.pose, state
    if index != 1 and (index - 1) % state.cadence != 0:
        return state.pose, state
    dt = scan.timestamp - state.last_update
    motion = _scaled(state.motion, dt / state.motion_dt) if state.motion_dt > 0 else Pose2()
    previous = state.pose
    predict(pset, motion, state.noise)
    refine_and_weight(pset, scan, state.beta)
    state.n_eff_log.append(pset.n_eff)
    adaptive_resample(pset, state.threshold_fraction)
    for p in pset.particles:
        insert_scan(p.map, p.pose, scan)
        p.history.append((scan.timestamp, p.pose))
    state.pose = estimate(pset)
    state.motion = between(previous, state.pose)
    state.motion_dt = dt
    state.last_update = scan.timestamp
    state.updates += 1
    return state.pose, state


class RBPFSLAM:
    name = "rbpf"

    def __init__(self, seed: int = 0, **kwargs):
        self.state = RBPFState.create(seed=seed, **kwargs)

    def process_scan(self, scan) -> Pose2:
        pose, _ = process_scan(self.state, scan)
        return pose

    def final_map(self) -> OccupancyGrid:
        return self.state.pset.particles[int(np.argmax(self.state.pset.weights))].map
