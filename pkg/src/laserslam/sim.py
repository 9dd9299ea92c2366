"""Deterministic synthetic data: worlds, trajectories and sensor models.

Sensor defaults follow a low-cost 360 degree scanner (0.15-12 m, 10 Hz),
a 1D lidar altimeter (0.30-12 m) mounted 8 cm below the vehicle reference,
and a 240 Hz motion-capture ground truth.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .geom import Pose2, Pose3, Trajectory, normalize_angle

log = logging.getLogger(__name__)

TRUTH_RATE = 240.0
SCAN_RATE = 10.0
IMU_RATE = 50.0
ALT_RATE = 20.0

NOMINAL_SPEED = 1.0
FAST_SPEED = 2.0
RECT_DIMS = (4.0, 2.0)
FIG8_RADIUS = 1.25

ALT_OFFSET = 0.08
ALT_MIN = 0.30
ALT_MAX = 12.0


@dataclass(frozen=True)
class LidarParams:
    range_min: float = 0.15
    range_max: float = 12.0
    angle_min: float = 0.0
    angle_increment: float = math.radians(1.0)
    sigma: float = 0.02
    rate: float = SCAN_RATE

    @property
    def n_beams(self) -> int:
        return int(round(2 * math.pi / self.angle_increment))


@dataclass
class World:
    segments: np.ndarray
    name: str = "custom"

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=float).reshape(-1, 4)
        if len(self.segments) < 3:
            raise ValueError("a world needs at least three wall segments")

    @classmethod
    def from_polygon(cls, vertices: Sequence[tuple], name: str = "custom") -> "World":
        v = np.asarray(vertices, dtype=float)
        return cls(np.hstack([v, np.roll(v, -1, axis=0)]), name)

    def distance_to_walls(self, p) -> float:
        a, b = self.segments[:, :2], self.segments[:, 2:]
        ab = b - a
        t = np.clip(np.einsum("ij,ij->i", np.asarray(p) - a, ab) / np.einsum("ij,ij->i", ab, ab), 0, 1)
        closest = a + t[:, None] * ab
        return float(np.min(np.hypot(*(closest - np.asarray(p)).T)))

    def to_json(self) -> dict:
        return {"name": self.name, "segments": self.segments.round(6).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "World":
        return cls(np.asarray(d["segments"], dtype=float), d.get("name", "custom"))


def lab_world() -> World:
    """6 m x 6 m square room centred on the start pose."""
    return World.from_polygon([(-3, -3), (3, -3), (3, 3), (-3, 3)], "lab")


def tunnel_world(length: float = 30.0, width: float = 6.0) -> World:
    """Straight corridor with end caps; the start pose sits 3 m from the west cap."""
    x0, x1 = -3.0, length - 3.0
    y0, y1 = -width / 2, width / 2
    return World.from_polygon([(x0, y0), (x1, y0), (x1, y1), (x0, y1)], "tunnel")


WORLDS = {"lab": lab_world, "tunnel": tunnel_world}


def load_world(name_or_path) -> World:
    if name_or_path in WORLDS:
        return WORLDS[name_or_path]()
    path = Path(name_or_path)
    if not path.exists():
        raise FileNotFoundError(f"world file not found: {path}")
    return World.from_json(json.loads(path.read_text()))


@dataclass
class LaserScan:
    timestamp: float
    angle_min: float
    angle_increment: float
    ranges: np.ndarray
    valid: np.ndarray
    range_min: float = 0.15
    range_max: float = 12.0
    degenerate: bool = False

    def __post_init__(self):
        self.ranges = np.asarray(self.ranges, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)

    @property
    def angles(self) -> np.ndarray:
        return self.angle_min + self.angle_increment * np.arange(len(self.ranges))

    @property
    def n_valid(self) -> int:
        return int(np.count_nonzero(self.valid))

    def endpoints(self) -> np.ndarray:
        """Valid beam endpoints in the sensor frame, shape (N, 2)."""
        a = self.angles[self.valid]
        r = self.ranges[self.valid]
        return np.column_stack((r * np.cos(a), r * np.sin(a)))


@dataclass(frozen=True)
class ImuSample:
    timestamp: float
    roll: float
    pitch: float
    yaw: float

    def __post_init__(self):
        for name in ("roll", "pitch", "yaw"):
            object.__setattr__(self, name, normalize_angle(getattr(self, name)))


@dataclass(frozen=True)
class AltSample:
    timestamp: float
    range: float
    valid: bool = True
    saturated: bool = False


@dataclass
class ScenarioRecord:
    ground_truth: Trajectory
    scans: list
    imu: list = field(default_factory=list)
    alt: list = field(default_factory=list)
    name: str = "custom"


# ---------------------------------------------------------------- lidar

def cast_rays(world: World, origin, angles: np.ndarray) -> np.ndarray:
    """Raw distance to the nearest wall for each ray direction (inf if none)."""
    ox, oy = float(origin[0]), float(origin[1])
    d = np.column_stack((np.cos(angles), np.sin(angles)))[:, None, :]
    a = world.segments[None, :, :2]
    e = world.segments[None, :, 2:] - a
    w = a - np.array([ox, oy])
    denom = d[..., 0] * e[..., 1] - d[..., 1] * e[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (w[..., 0] * e[..., 1] - w[..., 1] * e[..., 0]) / denom
        u = (w[..., 0] * d[..., 1] - w[..., 1] * d[..., 0]) / denom
    hit = (np.abs(denom) > 1e-12) & (t >= 0) & (u >= 0) & (u <= 1)
    return np.where(hit, t, np.inf).min(axis=1)


def ray_cast(world: World, origin, direction: float,
             range_min: float = 0.15, range_max: float = 12.0) -> float:
    """Distance along ``direction``; ``inf`` for no hit within range, ``nan`` if too close."""
    if not math.isfinite(direction):
        raise ValueError("ray direction must be finite")
    r = float(cast_rays(world, origin, np.array([direction]))[0])
    if r > range_max:
        return math.inf
    if r < range_min:
        return math.nan
    return r


def generate_scan(world: World, pose: Pose2, params: LidarParams = LidarParams(),
                  rng: np.random.Generator | None = None, timestamp: float = 0.0) -> LaserScan:
    n = params.n_beams
    rel = params.angle_min + params.angle_increment * np.arange(n)
    if world.distance_to_walls((pose.x, pose.y)) < 1e-6:
        return LaserScan(timestamp, params.angle_min, params.angle_increment,
                         np.full(n, np.nan), np.zeros(n, bool),
                         params.range_min, params.range_max, degenerate=True)
    r = cast_rays(world, (pose.x, pose.y), pose.yaw + rel)
    if params.sigma > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        r = r + rng.normal(0.0, params.sigma, n)
    valid = np.isfinite(r) & (r >= params.range_min) & (r <= params.range_max)
    return LaserScan(timestamp, params.angle_min, params.angle_increment,
                     np.where(valid, r, np.nan), valid, params.range_min, params.range_max)


# ---------------------------------------------------------- trajectories

def _time_grid(duration: float, rate: float, include_end: bool = True) -> np.ndarray:
    n = int(math.floor(duration * rate + 1e-9))
    t = np.arange(n + 1) / rate
    if include_end and duration - t[-1] > 1e-9:
        t = np.append(t, duration)
    return t


def rectangle_path(speed: float, dims=RECT_DIMS):
    """Position function for the closed rectangle; returns (fn(t) -> (x, y, yaw), duration).

    Starts at the origin, heads straight along +x, then follows the
    rectangle counter-clockwise back to the origin with the heading held
    at zero. The origin sits on the middle of the bottom edge.
    """
    if speed <= 0:
        raise ValueError("speed must be positive")
    w, h = dims
    corners = np.array([(0, 0), (w / 2, 0), (w / 2, h), (-w / 2, h), (-w / 2, 0), (0, 0)], float)
    seg = np.hypot(*np.diff(corners, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    duration = cum[-1] / speed

    def at(t):
        s = np.clip(np.asarray(t, dtype=float) * speed, 0, cum[-1])
        x = np.interp(s, cum, corners[:, 0])
        y = np.interp(s, cum, corners[:, 1])
        return x, y, np.zeros_like(x)

    return at, duration


def figure8_path(speed: float, radius: float = FIG8_RADIUS):
    """Two tangent circles through the origin, left loop counter-clockwise first."""
    if speed <= 0 or radius <= 0:
        raise ValueError("speed and radius must be positive")
    omega = speed / radius
    t_loop = 2 * math.pi / omega
    duration = 2 * t_loop

    def at(t):
        t = np.clip(np.asarray(t, dtype=float), 0, duration)
        first = t < t_loop
        phi = np.where(first, omega * t, omega * (t - t_loop))
        # loop 1: centre (0, R), CCW starting heading +x
        # loop 2: centre (0, -R), CW starting heading +x
        sign = np.where(first, 1.0, -1.0)
        x = radius * np.sin(phi)
        y = sign * radius * (1 - np.cos(phi))
        return x, y, np.arctan2(sign * np.sin(phi), np.cos(phi))

    return at, duration


def _sample(at, duration: float, rate: float) -> Trajectory:
    t = _time_grid(duration, rate)
    x, y, yaw = at(t)
    return Trajectory(t, [Pose2(a, b, c) for a, b, c in zip(x, y, yaw)])


def rectangle_trajectory(speed: float, dims=RECT_DIMS, rate: float = TRUTH_RATE) -> Trajectory:
    at, duration = rectangle_path(speed, dims)
    return _sample(at, duration, rate)


def figure8_trajectory(speed: float, radius: float = FIG8_RADIUS, rate: float = TRUTH_RATE) -> Trajectory:
    at, duration = figure8_path(speed, radius)
    return _sample(at, duration, rate)


# ------------------------------------------------------- other sensors

def sample_altimeter(true_altitude: float, tilt=(0.0, 0.0), noise: float = 0.0,
                     rng: np.random.Generator | None = None, timestamp: float = 0.0,
                     offset: float = ALT_OFFSET) -> AltSample:
    roll, pitch = tilt
    r = (true_altitude - offset) / (math.cos(roll) * math.cos(pitch))
    if noise > 0:
        r += (rng or np.random.default_rng(0)).normal(0.0, noise)
    if r > ALT_MAX:
        return AltSample(timestamp, ALT_MAX, valid=False)
    if r < ALT_MIN:
        return AltSample(timestamp, ALT_MIN, valid=True, saturated=True)
    return AltSample(timestamp, r)


def gate_scan(scan: LaserScan, imu: ImuSample | None, threshold: float = math.radians(10.0),
              period: float = 1.0 / SCAN_RATE) -> bool:
    """True to keep the scan, False if the sensor was tilted beyond ``threshold``."""
    if imu is None or abs(imu.timestamp - scan.timestamp) > period:
        log.warning("no IMU sample near scan at t=%.3f; keeping it", scan.timestamp)
        return True
    return not (abs(imu.roll) > threshold or abs(imu.pitch) > threshold)


def nearest_sample(samples: Sequence, times: np.ndarray, t: float, tol: float):
    """Sample whose timestamp is closest to ``t`` if within ``tol``, else None."""
    if not len(samples):
        return None
    i = int(np.searchsorted(times, t))
    best = None
    for j in (i - 1, i):
        if 0 <= j < len(samples) and (best is None or abs(times[j] - t) < abs(times[best] - t)):
            best = j
    return samples[best] if abs(times[best] - t) <= tol else None


# ----------------------------------------------------------- scenarios

SCENARIOS = {
    "rect_nominal": ("rect", NOMINAL_SPEED),
    "rect_fast": ("rect", FAST_SPEED),
    "fig8_nominal": ("fig8", NOMINAL_SPEED),
    "fig8_fast": ("fig8", FAST_SPEED),
}


@dataclass
class ScenarioConfig:
    scenario: str = "rect_nominal"
    world: str = "lab"
    seed: int = 0
    sigma: float = 0.02
    altitude: float = 1.0
    altitude_wave: float = 0.1
    tilt_amplitude: float = math.radians(2.0)
    alt_noise: float = 0.01
    truth_gaps: list = field(default_factory=list)


def _streams(seed: int):
    names = ("scan", "imu", "alt")
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {n: np.random.default_rng(c) for n, c in zip(names, children)}


def simulate_scenario(cfg: ScenarioConfig, world: World | None = None,
                      lidar: LidarParams | None = None) -> ScenarioRecord:
    """Generate truth, scans, IMU and altimeter streams for one scenario."""
    if cfg.scenario not in SCENARIOS:
        raise ValueError(f"unknown scenario {cfg.scenario!r}")
    kind, speed = SCENARIOS[cfg.scenario]
    at, duration = rectangle_path(speed) if kind == "rect" else figure8_path(speed)
    world = world or load_world(cfg.world)
    lidar = lidar or LidarParams(sigma=cfg.sigma)
    rng = _streams(cfg.seed)

    def attitude(t):
        a = cfg.tilt_amplitude
        return a * np.sin(2 * math.pi * 0.3 * t), a * np.sin(2 * math.pi * 0.2 * t + 1.0)

    def altitude(t):
        return cfg.altitude + cfg.altitude_wave * np.sin(2 * math.pi * t / max(duration, 1e-9))

    tt = _time_grid(duration, TRUTH_RATE)
    x, y, yaw = at(tt)
    roll, pitch = attitude(tt)
    z = altitude(tt)
    truth = [Pose3(*v) for v in zip(x, y, z, roll, pitch, yaw)]
    for start, end in cfg.truth_gaps:
        frozen = None
        for i, t in enumerate(tt):
            if start <= t <= end:
                if frozen is None:
                    frozen = truth[i - 1] if i > 0 else truth[0]
                truth[i] = frozen
    gt = Trajectory(tt, truth)

    scans = []
    for t in _time_grid(duration, SCAN_RATE, include_end=False):
        px, py, pyaw = (float(v) for v in at(t))
        scans.append(generate_scan(world, Pose2(px, py, pyaw), lidar, rng["scan"], float(t)))

    imu = []
    for t in _time_grid(duration, IMU_RATE, include_end=False):
        r, p = attitude(t)
        imu.append(ImuSample(float(t), float(r), float(p), float(at(t)[2])))

    alt = []
    for t in _time_grid(duration, ALT_RATE, include_end=False):
        r, p = attitude(t)
        alt.append(sample_altimeter(float(altitude(t)), (float(r), float(p)),
                                    cfg.alt_noise, rng["alt"], float(t)))
    return ScenarioRecord(gt, scans, imu, alt, cfg.scenario)


# ------------------------------------------------------ serialization

class RecordFormatError(ValueError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


def _f(v: float) -> float:
    return float(f"{v:.6f}")


def record_lines(rec: ScenarioRecord) -> Iterable[str]:
    """JSON-lines rows sorted by timestamp; ties ordered truth, imu, alt, scan."""
    rows = []
    for t, p in rec.ground_truth:
        rows.append((t, 0, {"type": "truth", "t": _f(t), "x": _f(p.x), "y": _f(p.y),
                            "z": _f(getattr(p, "z", 0.0)), "roll": _f(getattr(p, "roll", 0.0)),
                            "pitch": _f(getattr(p, "pitch", 0.0)), "yaw": _f(p.yaw)}))
    for s in rec.imu:
        rows.append((s.timestamp, 1, {"type": "imu", "t": _f(s.timestamp), "roll": _f(s.roll),
                                      "pitch": _f(s.pitch), "yaw": _f(s.yaw)}))
    for s in rec.alt:
        rows.append((s.timestamp, 2, {"type": "alt", "t": _f(s.timestamp), "range": _f(s.range),
                                      "valid": s.valid, "saturated": s.saturated}))
    for s in rec.scans:
        rows.append((s.timestamp, 3, {
            "type": "scan", "t": _f(s.timestamp), "angle_min": _f(s.angle_min),
            "angle_increment": float(f"{s.angle_increment:.9f}"),
            "range_min": s.range_min, "range_max": s.range_max,
            "ranges": [_f(r) if v else None for r, v in zip(s.ranges, s.valid)]}))
    rows.sort(key=lambda r: (r[0], r[1]))
    for _, _, d in rows:
        yield json.dumps(d, separators=(",", ":"))


def write_record(rec: ScenarioRecord, path) -> Path:
    path = Path(path)
    with path.open("w") as fh:
        for line in record_lines(rec):
            fh.write(line + "\n")
    return path


_REQUIRED = {
    "truth": ("t", "x", "y", "z", "roll", "pitch", "yaw"),
    "imu": ("t", "roll", "pitch", "yaw"),
    "alt": ("t", "range", "valid"),
    "scan": ("t", "angle_min", "angle_increment", "range_min", "range_max", "ranges"),
}


def read_record(path, name: str | None = None) -> ScenarioRecord:
    """Parse a JSON-lines record, raising :class:`RecordFormatError` with line numbers."""
    path = Path(path)
    truth_t, truth_p, scans, imu, alt = [], [], [], [], []
    last_t = -math.inf
    with path.open() as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise RecordFormatError(lineno, f"invalid JSON ({e.msg})") from None
            kind = d.get("type")
            if kind not in _REQUIRED:
                raise RecordFormatError(lineno, f"unknown record type {kind!r}")
            missing = [k for k in _REQUIRED[kind] if k not in d]
            if missing:
                raise RecordFormatError(lineno, f"{kind} record missing {', '.join(missing)}")
            t = float(d["t"])
            if t < last_t:
                raise RecordFormatError(lineno, f"timestamp {t} precedes {last_t}")
            last_t = t
            if kind == "truth":
                truth_t.append(t)
                truth_p.append(Pose3(d["x"], d["y"], d["z"], d["roll"], d["pitch"], d["yaw"]))
            elif kind == "imu":
                imu.append(ImuSample(t, d["roll"], d["pitch"], d["yaw"]))
            elif kind == "alt":
                alt.append(AltSample(t, float(d["range"]), bool(d["valid"]),
                                     bool(d.get("saturated", False))))
            else:
                raw = d["ranges"]
                valid = np.array([r is not None for r in raw])
                ranges = np.array([np.nan if r is None else float(r) for r in raw])
                scans.append(LaserScan(t, float(d["angle_min"]), float(d["angle_increment"]),
                                       ranges, valid, float(d["range_min"]), float(d["range_max"])))
    try:
        gt = Trajectory(truth_t, truth_p)
    except ValueError as e:
        raise RecordFormatError(0, str(e)) from None
    return ScenarioRecord(gt, scans, imu, alt, name or path.stem)
