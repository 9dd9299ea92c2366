"""Lift planar SLAM poses to 6-DoF with a downward rangefinder and IMU attitude.

The rangefinder sits a fixed distance below the vehicle reference point and
cannot read below its minimum range, so altitude has a floor (the blind
zone) at ``alt_min + sensor_offset``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .geom import Pose2, Pose3, Trajectory
from .sim import ALT_MAX, ALT_MIN, ALT_OFFSET, SCAN_RATE, AltSample, ImuSample, nearest_sample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionConfig:
    sensor_offset: float = ALT_OFFSET
    alt_min: float = ALT_MIN
    alt_max: float = ALT_MAX
    tilt_compensation: bool = True

    def __post_init__(self):
        if not self.alt_min < self.alt_max:
            raise ValueError("alt_min must be below alt_max")
        if self.sensor_offset < 0:
            raise ValueError("sensor_offset must be non-negative")


def effective_range(cfg: FusionConfig = FusionConfig()) -> tuple[float, float]:
    """Altitude band of the vehicle reference the rangefinder can resolve."""
    return round(cfg.alt_min + cfg.sensor_offset, 12), round(cfg.alt_max + cfg.sensor_offset, 12)


@dataclass
class FusionState:
    """The single held value plus flags describing the most recent output."""

    last_z: float | None = None
    blind_zone: bool = False
    stale: bool = False


def fuse(pose2: Pose2, alt: AltSample | None, imu: ImuSample | None,
         cfg: FusionConfig = FusionConfig(), state: FusionState | None = None) -> Pose3:
    state = state if state is not None else FusionState()
    roll = imu.roll if imu is not None else 0.0
    pitch = imu.pitch if imu is not None else 0.0
    floor = effective_range(cfg)[0]
    state.blind_zone = state.stale = False
    if alt is None or not alt.valid or not math.isfinite(alt.range):
        state.stale = True
        # nothing seen yet: the vehicle can only be somewhere in the blind zone
        z = state.last_z if state.last_z is not None else floor
    elif alt.saturated or alt.range < cfg.alt_min:
        state.blind_zone = True
        z = floor
        state.last_z = z
    else:
        r = alt.range * math.cos(roll) * math.cos(pitch) if cfg.tilt_compensation else alt.range
        z = cfg.sensor_offset + r
        if z < floor:
            # a short slant range under heavy tilt still cannot see below the floor
            z, state.blind_zone = floor, True
        state.last_z = z
    return Pose3(pose2.x, pose2.y, z, roll, pitch, pose2.yaw)


def fuse_trajectory(est: Trajectory, alt: list, imu: list, cfg: FusionConfig = FusionConfig(),
                    tol: float = 1.0 / SCAN_RATE) -> tuple[Trajectory, list]:
    """Fuse each estimate with the nearest altimeter/IMU samples within ``tol``.

    Returns the 3D trajectory and per-sample ``(blind_zone, stale)`` flags.
    """
    alt_t = np.array([a.timestamp for a in alt])
    imu_t = np.array([s.timestamp for s in imu])
    state = FusionState()
    poses, flags = [], []
    for t, p in est:
        a = nearest_sample(alt, alt_t, t, tol)
        m = nearest_sample(imu, imu_t, t, tol)
        if m is None and imu:
            log.warning("no IMU sample within %.3f s of t=%.3f; assuming level", tol, t)
        poses.append(fuse(p, a, m, cfg, state))
        flags.append((state.blind_zone, state.stale))
    return Trajectory(est.times.copy(), poses), flags
