"""Attach altimeter height and IMU attitude to a 2D estimate."""
import math

from laserslam.cli import run_pipeline
from laserslam.evaluation import evaluate
from laserslam.fusion import FusionConfig, FusionState, effective_range, fuse, fuse_trajectory
from laserslam.geom import Pose2
from laserslam.sim import AltSample, ImuSample, ScenarioConfig, simulate_scenario

lo, hi = effective_range()
print(f"usable height {lo:.2f} to {hi:.2f} m above the floor")

level = ImuSample(0.0, 0.0, 0.0, 0.0)
for r, sat, roll in [(1.0, False, 0.0), (1.0, False, 60.0), (0.2, True, 0.0)]:
    s = FusionState()
    z = fuse(Pose2(), AltSample(0.0, r, True, sat), ImuSample(0.0, math.radians(roll), 0.0, 0.0), state=s).z
    print(f"range {r:.2f} m, roll {roll:4.0f} deg -> z {z:.2f} m{'  (blind zone)' if s.blind_zone else ''}")

rec = simulate_scenario(ScenarioConfig("rect_nominal", seed=1))
est, _ = run_pipeline(rec, "hector")
# the simulated tilt stays within 2 deg, so compensation moves z by well under a millimetre
for cfg in (FusionConfig(), FusionConfig(tilt_compensation=False)):
    traj, flags = fuse_trajectory(est, rec.alt, rec.imu, cfg)
    m, _ = evaluate(rec.ground_truth, traj)
    stale = sum(f[1] for f in flags)
    print(f"tilt compensation {cfg.tilt_compensation!s:5s}: 3D RMSE {m.rmse_cm:.2f} cm, {stale} stale heights")
