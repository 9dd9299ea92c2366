"""Planar and spatial poses, angle arithmetic and timestamped pose series.

Conventions: right-handed frames, yaw measured from +x toward +y, every
angle kept in the half-open interval (-pi, pi]. Timestamps are seconds
relative to the start of a scenario.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

TWO_PI = 2.0 * math.pi


def normalize_angle(theta: float) -> float:
    """Wrap ``theta`` into (-pi, pi]."""
    if not math.isfinite(theta):
        raise ValueError(f"cannot normalize non-finite angle {theta!r}")
    wrapped = math.fmod(theta, TWO_PI)
    if wrapped <= -math.pi:
        wrapped += TWO_PI
    elif wrapped > math.pi:
        wrapped -= TWO_PI
    return wrapped


def normalize_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorised :func:`normalize_angle`."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("cannot normalize non-finite angles")
    wrapped = np.fmod(theta, TWO_PI)
    wrapped = np.where(wrapped <= -math.pi, wrapped + TWO_PI, wrapped)
    wrapped = np.where(wrapped > math.pi, wrapped - TWO_PI, wrapped)
    return wrapped


def angular_diff(a: float, b: float) -> float:
    """Signed shortest rotation taking ``b`` onto ``a``."""
    return normalize_angle(a - b)


@dataclass(frozen=True)
class Pose2:
    """Planar pose; yaw is normalized on construction."""

    x: float = 0.0
    y: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "x", float(self.x))
        object.__setattr__(self, "y", float(self.y))
        object.__setattr__(self, "yaw", normalize_angle(float(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.yaw])

    @classmethod
    def from_array(cls, v) -> "Pose2":
        return cls(float(v[0]), float(v[1]), float(v[2]))

    def transform_points(self, pts: np.ndarray) -> np.ndarray:
        """Map (N, 2) points from this pose's frame into the parent frame."""
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        pts = np.asarray(pts, dtype=float).reshape(-1, 2)
        out = np.empty_like(pts)
        out[:, 0] = c * pts[:, 0] - s * pts[:, 1] + self.x
        out[:, 1] = s * pts[:, 0] + c * pts[:, 1] + self.y
        return out

    def __matmul__(self, other: "Pose2") -> "Pose2":
        return compose(self, other)


@dataclass(frozen=True)
class Pose3:
    """Spatial pose as position plus roll/pitch/yaw.

    Only x, y, z and yaw come from the laser and altimeter; roll and pitch
    are passed through from the IMU.
    """

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    roll: float = 0.0
    pitch: float = 0.0
    yaw: float = 0.0

    def __post_init__(self):
        for name in ("x", "y", "z"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, normalize_angle(float(getattr(self, name))))

    def to_pose2(self) -> Pose2:
        return Pose2(self.x, self.y, self.yaw)


AnyPose = Union[Pose2, Pose3]

IDENTITY = Pose2()


def compose(a: Pose2, b: Pose2) -> Pose2:
    """a ⊕ b: ``b`` expressed in ``a``'s frame, mapped to the global frame."""
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(a.x + c * b.x - s * b.y, a.y + s * b.x + c * b.y, a.yaw + b.yaw)


def inverse(a: Pose2) -> Pose2:
    c, s = math.cos(a.yaw), math.sin(a.yaw)
    return Pose2(-c * a.x - s * a.y, s * a.x - c * a.y, -a.yaw)


def between(a: Pose2, b: Pose2) -> Pose2:
    """Pose of ``b`` expressed in the frame of ``a``."""
    return compose(inverse(a), b)


@dataclass
class Trajectory:
    """Ordered (timestamp, pose) samples with strictly increasing times."""

    times: np.ndarray
    poses: list = field(default_factory=list)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float).reshape(-1)
        self.poses = list(self.poses)
        if len(self.times) != len(self.poses):
            raise ValueError("times and poses differ in length")
        if len(self.times) > 1 and not np.all(np.diff(self.times) > 0):
            raise ValueError("trajectory timestamps must be strictly increasing")

    @classmethod
    def from_samples(cls, samples: Sequence[tuple]) -> "Trajectory":
        return cls(np.array([t for t, _ in samples], dtype=float), [p for _, p in samples])

    def __len__(self) -> int:
        return len(self.poses)

    def __iter__(self):
        return iter(zip(self.times, self.poses))

    def __getitem__(self, i):
        return self.times[i], self.poses[i]

    @property
    def is_3d(self) -> bool:
        return bool(self.poses) and isinstance(self.poses[0], Pose3)

    def xy(self) -> np.ndarray:
        return np.array([[p.x, p.y] for p in self.poses], dtype=float).reshape(-1, 2)

    def xyz(self) -> np.ndarray:
        return np.array([[p.x, p.y, getattr(p, "z", 0.0)] for p in self.poses],
                        dtype=float).reshape(-1, 3)

    def yaws(self) -> np.ndarray:
        return np.array([p.yaw for p in self.poses], dtype=float)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0]) if len(self) else 0.0

    def to_2d(self) -> "Trajectory":
        if not self.is_3d:
            return self
        return Trajectory(self.times.copy(), [p.to_pose2() for p in self.poses])
