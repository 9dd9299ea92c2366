"""Trajectory accuracy: time alignment, RMSE, yaw error, delay and reports.

Truth arrives at a much higher rate than the estimates, so each estimate is
paired with truth interpolated at its timestamp. Where the truth stream
stalls (identical samples for longer than ``stale_window``) the pair is
flagged stale and left out of every metric.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import Pose2, Pose3, Trajectory, angular_diff, normalize_angle

STALE_WINDOW = 0.5
MODES = ("error_norm", "literal_diff")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class AlignedPair:
    timestamp: float
    truth: Pose2 | Pose3
    estimate: Pose2 | Pose3
    stale: bool = False


def _lerp_angle(a: float, b: float, f: float) -> float:
    return normalize_angle(a + f * angular_diff(b, a))


def _interp(p0, p1, f: float):
    if f == 0.0:
        return p0
    if isinstance(p0, Pose3):
        return Pose3(p0.x + f * (p1.x - p0.x), p0.y + f * (p1.y - p0.y), p0.z + f * (p1.z - p0.z),
                     _lerp_angle(p0.roll, p1.roll, f), _lerp_angle(p0.pitch, p1.pitch, f),
                     _lerp_angle(p0.yaw, p1.yaw, f))
    return Pose2(p0.x + f * (p1.x - p0.x), p0.y + f * (p1.y - p0.y), _lerp_angle(p0.yaw, p1.yaw, f))


def _frozen_runs(truth: Trajectory) -> tuple[np.ndarray, np.ndarray]:
    """Run id per sample (consecutive identical poses share an id) and run durations."""
    same = np.array([truth.poses[i] == truth.poses[i - 1] for i in range(1, len(truth))], dtype=bool)
    run = np.concatenate([[0], np.cumsum(~same)])
    first = np.searchsorted(run, np.arange(run[-1] + 1), side="left")
    last = np.searchsorted(run, np.arange(run[-1] + 1), side="right") - 1
    return run, truth.times[last] - truth.times[first]


def align(truth: Trajectory, est: Trajectory, stale_window: float = STALE_WINDOW) -> list:
    if len(truth) == 0 or len(est) == 0:
        raise EvaluationError("cannot align an empty trajectory")
    t0, t1 = truth.times[0], truth.times[-1]
    inside = (est.times >= t0) & (est.times <= t1)
    if not inside.any():
        raise EvaluationError(f"no temporal overlap: truth spans [{t0:.3f}, {t1:.3f}] s, "
                              f"estimate spans [{est.times[0]:.3f}, {est.times[-1]:.3f}] s")
    run, run_len = _frozen_runs(truth)
    pairs = []
    for t, p in zip(est.times[inside], np.asarray(est.poses, dtype=object)[inside]):
        i = int(np.searchsorted(truth.times, t, side="right")) - 1
        i = min(i, len(truth) - 1)
        if i == len(truth) - 1 or truth.times[i] == t:
            j, f = i, 0.0
        else:
            j = i + 1
            f = float((t - truth.times[i]) / (truth.times[j] - truth.times[i]))
        stale = bool(run[i] == run[j] and run_len[run[i]] > stale_window)
        pairs.append(AlignedPair(float(t), _interp(truth.poses[i], truth.poses[j], f), p, stale))
    return pairs


def displacement2(truth: Pose2, est: Pose2) -> float:
    return math.hypot(truth.x - est.x, truth.y - est.y)


def displacement3(truth: Pose3, est: Pose3) -> float:
    return math.sqrt((truth.x - est.x) ** 2 + (truth.y - est.y) ** 2 + (truth.z - est.z) ** 2)


def _both_3d(pair: AlignedPair) -> bool:
    return isinstance(pair.truth, Pose3) and isinstance(pair.estimate, Pose3)


def displacement(pair: AlignedPair) -> float:
    if _both_3d(pair):
        return displacement3(pair.truth, pair.estimate)
    return displacement2(pair.truth, pair.estimate)


def _usable(pairs) -> list:
    good = [p for p in pairs if not p.stale]
    if not good:
        raise EvaluationError("no usable (non-stale) pairs")
    return good


def rmse(pairs, mode: str = "error_norm") -> float:
    """Root mean square position error in centimetres.

    ``literal_diff`` differences each pose's distance from the origin
    instead of measuring the error vector.
    """
    good = _usable(pairs)
    if mode == "error_norm":
        d = np.array([displacement(p) for p in good])
    elif mode == "literal_diff":
        origin2, origin3 = Pose2(), Pose3()
        d = np.array([displacement3(p.truth, origin3) - displacement3(p.estimate, origin3)
                      if _both_3d(p) else
                      displacement2(p.truth, origin2) - displacement2(p.estimate, origin2)
                      for p in good])
    else:
        raise ValueError(f"unknown rmse mode {mode!r}; expected one of {MODES}")
    return 100.0 * float(np.sqrt(np.mean(d * d)))


def yaw_rmse(pairs) -> float:
    """Yaw RMSE in degrees over shortest-arc differences."""
    good = _usable(pairs)
    e = np.array([angular_diff(p.truth.yaw, p.estimate.yaw) for p in good])
    return math.degrees(float(np.sqrt(np.mean(e * e))))


def estimate_delay(truth_yaw, est_yaw, max_lag: float, dt: float) -> float:
    """Lag (s) in [0, max_lag] at which the estimate best correlates with truth.

    Both series share one uniform grid of spacing ``dt``; angles are unwrapped
    first. Every integer lag is tried and the Pearson correlation of the
    overlapping parts maximised; the smallest lag wins ties. Returns nan when
    either series is flat (the delay is undefined).
    """
    a = np.unwrap(np.asarray(truth_yaw, dtype=float))
    b = np.unwrap(np.asarray(est_yaw, dtype=float))
    if len(a) != len(b):
        raise ValueError("series must share one time grid")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        return float("nan")
    best, best_lag = -np.inf, 0
    for lag in range(0, min(int(round(max_lag / dt)), len(a) - 2) + 1):
        x, y = a[:len(a) - lag], b[lag:]
        if np.ptp(x) == 0 or np.ptp(y) == 0:
            continue
        c = np.corrcoef(x, y)[0, 1]
        if c > best:
            best, best_lag = c, lag
    return best_lag * dt


def common_grid(truth: Trajectory, est: Trajectory, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Both yaw series on a shared uniform grid.

    Truth is interpolated; the estimate takes the value in force at each
    grid time, as a consumer of the estimate stream would see it.
    """
    t0 = max(truth.times[0], est.times[0])
    t1 = min(truth.times[-1], est.times[-1])
    if t1 <= t0:
        raise EvaluationError("no temporal overlap for delay estimation")
    grid = t0 + dt * np.arange(int(math.floor((t1 - t0) / dt + 1e-9)) + 1)
    ty = np.interp(grid, truth.times, np.unwrap(truth.yaws()))
    # hold-style estimates: the value in force at each grid time
    idx = np.searchsorted(est.times, grid + 1e-9, side="right") - 1
    ey = np.unwrap(est.yaws())[np.clip(idx, 0, len(est) - 1)]
    return grid, ty, ey


# -------------------------------------------------------------- reports

@dataclass
class ScenarioMetrics:
    rmse_cm: float
    yaw_rmse_deg: float = float("nan")
    delay_s: float = float("nan")
    pairs: int = 0
    stale: int = 0


@dataclass
class EvalReport:
    """approach -> scenario -> metrics, plus per-approach averages."""

    results: dict = field(default_factory=dict)
    mode: str = "error_norm"

    def average(self, approach: str) -> float:
        vals = [m.rmse_cm for m in self.results[approach].values()]
        return float(np.mean(vals))

    @property
    def averages(self) -> dict:
        return {a: self.average(a) for a in self.results}

    def scenarios(self) -> list:
        seen = []
        for rows in self.results.values():
            seen += [s for s in rows if s not in seen]
        return seen

    def to_json(self) -> dict:
        def num(v):
            return None if v is None or not math.isfinite(v) else round(float(v), 6)
        return {
            "mode": self.mode,
            "units": {"rmse": "cm", "yaw_rmse": "deg", "delay": "s"},
            "results": {a: {s: {"rmse": num(m.rmse_cm), "yaw_rmse": num(m.yaw_rmse_deg),
                                "delay": num(m.delay_s), "pairs": m.pairs, "stale": m.stale}
                            for s, m in rows.items()} for a, rows in self.results.items()},
            "average": {a: round(v, 2) for a, v in self.averages.items()},
        }

    def to_table(self) -> str:
        """Aligned text table: one row per approach, RMSE (cm) per scenario, then the average."""
        cols = self.scenarios()
        head = ["Approach"] + cols + ["Average"]
        rows = []
        for a, res in self.results.items():
            rows.append([a] + [f"{res[s].rmse_cm:.2f}" if s in res else "-" for s in cols]
                        + [f"{self.average(a):.2f}"])
        widths = [max(len(r[i]) for r in [head] + rows) for i in range(len(head))]
        fmt = lambda r: "  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                                  for i, (c, w) in enumerate(zip(r, widths)))
        lines = [f"RMSE in cm ({self.mode})", fmt(head), "  ".join("-" * w for w in widths)]
        return "\n".join(lines + [fmt(r) for r in rows]) + "\n"

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        js = out / f"{stem}.json"
        js.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        txt = out / f"{stem}.txt"
        txt.write_text(self.to_table())
        return js, txt


def aggregate(per_scenario: dict, approach: str = "estimate", mode: str = "error_norm") -> EvalReport:
    """Build a report; values may be plain cm numbers or ScenarioMetrics.

    A nested ``{approach: {scenario: value}}`` mapping yields one row per approach.
    """
    if not per_scenario:
        raise EvaluationError("nothing to aggregate")
    nested = all(isinstance(v, dict) for v in per_scenario.values())
    table = per_scenario if nested else {approach: per_scenario}
    results = {a: {s: v if isinstance(v, ScenarioMetrics) else ScenarioMetrics(float(v))
                   for s, v in rows.items()} for a, rows in table.items()}
    return EvalReport(results, mode)


def write_pairs_csv(pairs, path) -> Path:
    """Per-pair dump for external plotting."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "truth_x", "truth_y", "truth_z", "truth_yaw",
                    "est_x", "est_y", "est_z", "est_yaw", "displacement", "stale"])
        for p in pairs:
            w.writerow([f"{p.timestamp:.6f}"]
                       + [f"{v:.6f}" for v in (p.truth.x, p.truth.y, getattr(p.truth, "z", 0.0), p.truth.yaw,
                                               p.estimate.x, p.estimate.y, getattr(p.estimate, "z", 0.0),
                                               p.estimate.yaw, displacement(p))]
                       + [int(p.stale)])
    return path


def evaluate(truth: Trajectory, est: Trajectory, mode: str = "error_norm",
             stale_window: float = STALE_WINDOW, max_lag: float = 2.0, dt: float = 0.1):
    """Align and score one run; returns ``(ScenarioMetrics, pairs)``."""
    pairs = align(truth, est, stale_window)
    try:
        _, ty, ey = common_grid(truth, est, dt)
        delay = estimate_delay(ty, ey, max_lag, dt)
    except EvaluationError:
        delay = float("nan")
    m = ScenarioMetrics(rmse(pairs, mode), yaw_rmse(pairs), delay, len(pairs),
                        sum(p.stale for p in pairs))
    return m, pairs
